//! Physical constants, the D1–D2–b crystal frame and the nearest-neighbour
//! yttrium catalog around an erbium dopant in site 1 of Y₂SiO₅.
//!
//! Everything downstream works in SI units. Site positions are stored in
//! ångström because that is how crystallographic tables are written; use
//! [`YttriumSite::position_m`] to cross into SI.

use std::fmt;
use std::path::Path;

use nalgebra::{Matrix3, Vector3 as NVector3};
use serde::{Deserialize, Serialize};

use crate::error::{OeemError, Result};

/// Cartesian vector in the (D1, D2, b) frame.
pub type Vector3 = NVector3<f64>;
/// Real 3×3 matrix in the (D1, D2, b) frame.
pub type Tensor3x3 = Matrix3<f64>;

pub const ANGSTROM: f64 = 1e-10;

/// Nuclear g-factor of ⁸⁹Y in YSO.
pub const G_Y_DEFAULT: f64 = -0.2737;

/// Gyromagnetic ratio of the bare ⁸⁹Y nucleus, MHz/T.
pub const FREE_ION_GAMMA_MHZ_PER_T: f64 = -2.0949;
/// Orbital shielding factor relating the free-ion ratio to the YCl₃ reference.
pub const SHIELDING_FACTOR: f64 = 1.0041;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicalConstants {
    /// Nuclear magneton, J/T.
    pub mu_n: f64,
    /// Bohr magneton, J/T.
    pub mu_b: f64,
    /// Planck constant, J·s.
    pub h: f64,
    /// Vacuum permeability, T·m/A.
    pub mu_0: f64,
    /// Nuclear g-factor of the bath nuclei.
    pub g_y: f64,
}

impl Default for PhysicalConstants {
    fn default() -> Self {
        // CODATA 2018
        PhysicalConstants {
            mu_n: 5.050_783_746_1e-27,
            mu_b: 9.274_010_078_3e-24,
            h: 6.626_070_15e-34,
            mu_0: 1.256_637_062_12e-6,
            g_y: G_Y_DEFAULT,
        }
    }
}

impl PhysicalConstants {
    pub fn with_g_y(g_y: f64) -> Self {
        PhysicalConstants {
            g_y,
            ..Default::default()
        }
    }

    /// μN·|g_Y|/h in Hz/T: the factor turning a field magnitude into a
    /// nuclear Zeeman splitting.
    pub fn nuclear_gamma_hz_per_t(&self) -> f64 {
        self.mu_n * self.g_y.abs() / self.h
    }

    /// μ0/4π, T·m/A.
    pub fn dipolar_prefactor(&self) -> f64 {
        self.mu_0 / (4.0 * std::f64::consts::PI)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.mu_n, self.mu_b, self.h, self.mu_0, self.g_y];
        if all.iter().any(|v| !v.is_finite() || *v == 0.0) {
            return Err(OeemError::Config(
                "physical constants must be finite and nonzero".into(),
            ));
        }
        Ok(())
    }
}

/// One of the two magnetically inequivalent orientations of a dopant site,
/// related by a two-fold rotation about b.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MagneticClass {
    I,
    II,
}

impl MagneticClass {
    pub const BOTH: [MagneticClass; 2] = [MagneticClass::I, MagneticClass::II];

    /// Rotation taking class-I quantities to this class.
    pub fn rotation(self) -> Tensor3x3 {
        match self {
            MagneticClass::I => Tensor3x3::identity(),
            MagneticClass::II => Tensor3x3::from_diagonal(&Vector3::new(-1.0, -1.0, 1.0)),
        }
    }
}

impl fmt::Display for MagneticClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MagneticClass::I => f.write_str("I"),
            MagneticClass::II => f.write_str("II"),
        }
    }
}

impl std::str::FromStr for MagneticClass {
    type Err = OeemError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "I" | "1" | "i" => Ok(MagneticClass::I),
            "II" | "2" | "ii" => Ok(MagneticClass::II),
            other => Err(OeemError::InvalidInput(format!(
                "unknown magnetic class {other:?}"
            ))),
        }
    }
}

/// Maps a class-I vector to the given class: identity for I, C₂(b) for II.
pub fn class_transform(v: &Vector3, class: MagneticClass) -> Vector3 {
    match class {
        MagneticClass::I => *v,
        MagneticClass::II => Vector3::new(-v.x, -v.y, v.z),
    }
}

/// Similarity transform R·T·Rᵀ of a class-I tensor into the given class.
pub fn class_transform_tensor(t: &Tensor3x3, class: MagneticClass) -> Tensor3x3 {
    let r = class.rotation();
    r * t * r.transpose()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YttriumSite {
    pub label: String,
    /// Position relative to the dopant, Å.
    pub position: Vector3,
    /// Tabulated distance, Å.
    pub distance: f64,
}

impl YttriumSite {
    pub fn new(label: impl Into<String>, d1: f64, d2: f64, b: f64) -> Self {
        let position = Vector3::new(d1, d2, b);
        YttriumSite {
            label: label.into(),
            distance: position.norm(),
            position,
        }
    }

    pub fn position_m(&self) -> Vector3 {
        self.position * ANGSTROM
    }

    /// The same nucleus seen from a dopant of the other magnetic class.
    pub fn in_class(&self, class: MagneticClass) -> YttriumSite {
        YttriumSite {
            label: self.label.clone(),
            position: class_transform(&self.position, class),
            distance: self.distance,
        }
    }
}

// label, tabulated d (Å), D1, D2, b (Å); class I of site 1.
const TABLE_SITES: [(&str, f64, f64, f64, f64); 15] = [
    ("Y1", 3.40, -0.65, 3.23, -0.81),
    ("Y2", 3.46, -3.45, 0.29, 0.00),
    ("Y3", 3.51, -1.67, -1.87, 2.45),
    ("Y4", 3.62, 2.26, -2.25, -1.72),
    ("Y5", 3.72, -1.78, 2.16, 2.45),
    ("Y6", 4.15, -2.80, -2.95, -0.81),
    ("Y7", 4.70, 3.93, -0.38, 2.55),
    ("Y8", 4.95, -1.67, -1.87, -4.27),
    ("Y9", 5.10, -1.78, 2.16, -4.27),
    ("Y10", 5.19, 5.06, 0.70, -0.91),
    ("Y11", 5.46, -1.02, -5.10, 1.64),
    ("Y12", 5.46, 1.02, 5.10, 1.64),
    ("Y13", 5.50, 3.28, 2.86, -3.36),
    ("Y14", 5.50, 3.28, 2.86, 3.36),
    ("Y15", 5.74, 3.93, -0.38, -4.17),
];

/// The fifteen nearest yttrium neighbours of an Er dopant (site 1, class I).
pub fn default_site_catalog() -> Vec<YttriumSite> {
    TABLE_SITES
        .iter()
        .map(|&(label, d, d1, d2, b)| YttriumSite {
            label: label.to_string(),
            position: Vector3::new(d1, d2, b),
            distance: d,
        })
        .collect()
}

/// Tolerance between a tabulated distance and the norm of its position, Å.
pub const DISTANCE_TOLERANCE: f64 = 0.01;

/// Checks the catalog invariants: distances agree with positions and are
/// non-decreasing by index, labels are unique.
pub fn validate_catalog(sites: &[YttriumSite]) -> Result<()> {
    if sites.is_empty() {
        return Err(OeemError::Config("site catalog is empty".into()));
    }
    for site in sites {
        if !site.position.iter().all(|c| c.is_finite()) {
            return Err(OeemError::Config(format!(
                "site {} has a non-finite position",
                site.label
            )));
        }
        if site.position.norm() == 0.0 {
            return Err(OeemError::Config(format!(
                "site {} sits on the dopant",
                site.label
            )));
        }
        if (site.position.norm() - site.distance).abs() > DISTANCE_TOLERANCE {
            return Err(OeemError::Config(format!(
                "site {}: distance {} Å disagrees with |position| = {:.4} Å",
                site.label,
                site.distance,
                site.position.norm()
            )));
        }
    }
    for pair in sites.windows(2) {
        if pair[1].distance < pair[0].distance {
            return Err(OeemError::Config(format!(
                "sites must be ordered by distance ({} after {})",
                pair[1].label, pair[0].label
            )));
        }
    }
    let mut labels: Vec<&str> = sites.iter().map(|s| s.label.as_str()).collect();
    labels.sort_unstable();
    if labels.windows(2).any(|w| w[0] == w[1]) {
        return Err(OeemError::Config("duplicate site labels".into()));
    }
    Ok(())
}

#[derive(Debug, Deserialize, Serialize)]
struct SiteRecord {
    label: String,
    d1_angstrom: f64,
    d2_angstrom: f64,
    b_angstrom: f64,
    #[serde(default)]
    distance_angstrom: Option<f64>,
}

#[derive(Debug, Deserialize, Serialize)]
struct SiteFile {
    site: Vec<SiteRecord>,
}

/// Parses a site-catalog override (TOML, one `[[site]]` table per nucleus).
pub fn parse_site_catalog(text: &str) -> Result<Vec<YttriumSite>> {
    let file: SiteFile =
        toml::from_str(text).map_err(|e| OeemError::Config(format!("site file: {e}")))?;
    let sites: Vec<YttriumSite> = file
        .site
        .into_iter()
        .map(|r| {
            let mut site = YttriumSite::new(r.label, r.d1_angstrom, r.d2_angstrom, r.b_angstrom);
            if let Some(d) = r.distance_angstrom {
                site.distance = d;
            }
            site
        })
        .collect();
    validate_catalog(&sites)?;
    Ok(sites)
}

pub fn load_site_catalog(path: &Path) -> Result<Vec<YttriumSite>> {
    let text = std::fs::read_to_string(path).map_err(|e| OeemError::io(path, e))?;
    parse_site_catalog(&text)
}

/// Serializes a catalog in the override-file schema.
pub fn site_catalog_to_toml(sites: &[YttriumSite]) -> String {
    let file = SiteFile {
        site: sites
            .iter()
            .map(|s| SiteRecord {
                label: s.label.clone(),
                d1_angstrom: s.position.x,
                d2_angstrom: s.position.y,
                b_angstrom: s.position.z,
                distance_angstrom: Some(s.distance),
            })
            .collect(),
    };
    toml::to_string(&file).expect("site catalog serializes")
}

/// Index of the site with the given label.
pub fn find_site(sites: &[YttriumSite], label: &str) -> Result<usize> {
    sites
        .iter()
        .position(|s| s.label.eq_ignore_ascii_case(label))
        .ok_or_else(|| OeemError::InvalidInput(format!("no site labelled {label:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catalog_matches_table() {
        let sites = default_site_catalog();
        assert_eq!(sites.len(), 15);
        assert_eq!(sites[0].label, "Y1");
        assert_eq!(sites[0].distance, 3.40);
        assert_eq!(sites[3].label, "Y4");
        assert_eq!(sites[3].position, Vector3::new(2.26, -2.25, -1.72));
        assert_eq!(sites[3].distance, 3.62);
        validate_catalog(&sites).unwrap();
    }

    #[test]
    fn catalog_distances_consistent() {
        for s in default_site_catalog() {
            assert!(
                (s.position.norm() - s.distance).abs() <= DISTANCE_TOLERANCE,
                "{}",
                s.label
            );
        }
    }

    #[test]
    fn constants_sane() {
        let c = PhysicalConstants::default();
        c.validate().unwrap();
        let ratio = c.mu_b / c.mu_n;
        assert!((ratio / 1836.0 - 1.0).abs() < 0.01);
        let gamma = c.nuclear_gamma_hz_per_t() / 1e6;
        assert!((gamma / 2.0863 - 1.0).abs() < 5e-4, "{gamma}");
    }

    #[test]
    fn class_transform_examples() {
        let v = Vector3::new(1.0, 2.0, 3.0);
        assert_eq!(
            class_transform(&v, MagneticClass::II),
            Vector3::new(-1.0, -2.0, 3.0)
        );
        assert_eq!(class_transform(&v, MagneticClass::I), v);
        let b = Vector3::new(0.0, 0.0, 5.0);
        assert_eq!(class_transform(&b, MagneticClass::II), b);
    }

    #[test]
    fn tensor_transform_matches_vector_transform() {
        let t = Tensor3x3::new(1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0);
        let v = Vector3::new(0.3, -1.1, 2.0);
        let class = MagneticClass::II;
        let lhs = class_transform_tensor(&t, class) * class_transform(&v, class);
        let rhs = class_transform(&(t * v), class);
        assert!((lhs - rhs).norm() < 1e-14);
    }

    #[test]
    fn site_file_round_trip() {
        let sites = default_site_catalog();
        let text = site_catalog_to_toml(&sites);
        let back = parse_site_catalog(&text).unwrap();
        assert_eq!(back, sites);
    }

    #[test]
    fn site_file_rejects_bad_order() {
        let text = r#"
[[site]]
label = "far"
d1_angstrom = 6.0
d2_angstrom = 0.0
b_angstrom = 0.0

[[site]]
label = "near"
d1_angstrom = 3.0
d2_angstrom = 0.0
b_angstrom = 0.0
"#;
        assert!(matches!(
            parse_site_catalog(text),
            Err(OeemError::Config(_))
        ));
    }

    #[test]
    fn site_file_rejects_inconsistent_distance() {
        let text = r#"
[[site]]
label = "Yx"
d1_angstrom = 3.0
d2_angstrom = 0.0
b_angstrom = 0.0
distance_angstrom = 3.5
"#;
        assert!(parse_site_catalog(text).is_err());
    }
}
