use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// How lesions of one class are drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LesionSpec {
    /// Inclusive range of lesion counts per sample (per parent lesion when
    /// `inside` is set).
    pub count: [u32; 2],
    /// Radius range in voxels.
    pub radius: [f64; 2],
    /// Intensity offset in units of each modality's `intensity_std`. Drawn
    /// once from the domain seed when absent.
    #[serde(default)]
    pub offset: Option<f64>,
    /// Place these lesions at the center of every lesion of the named class,
    /// rendered on top of it (e.g. a core inside a halo).
    #[serde(default)]
    pub inside: Option<String>,
}

/// Parameters of one synthetic domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub domain_id: usize,
    pub name: String,
    pub n_modalities: usize,
    pub intensity_mean: Vec<f64>,
    pub intensity_std: Vec<f64>,
    pub noise_std: f64,
    pub label_set: Vec<String>,
    pub lesions: BTreeMap<String, LesionSpec>,
    pub volume_shape: [usize; 3],
    pub seed: u64,
}

impl DomainSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: DomainSpec = toml::from_str(text).map_err(|e| Error::config(format!("domain spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read domain spec {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("domain spec serializes")
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("domain spec serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.n_modalities;
        if m == 0 {
            return Err(Error::config("n_modalities must be >= 1"));
        }
        if self.intensity_mean.len() != m || self.intensity_std.len() != m {
            return Err(Error::config(format!(
                "intensity_mean/intensity_std need {m} entries, got {}/{}",
                self.intensity_mean.len(),
                self.intensity_std.len()
            )));
        }
        if self.intensity_std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::config("intensity_std must be positive"));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::config("noise_std must be non-negative"));
        }
        if self.volume_shape.iter().any(|&e| e == 0) {
            return Err(Error::config("volume_shape extents must be >= 1"));
        }
        if self.label_set.len() > 254 {
            return Err(Error::config("at most 254 classes fit an 8-bit labelmap"));
        }
        let min_extent = *self.volume_shape.iter().min().expect("three extents") as f64;
        for (i, l) in self.label_set.iter().enumerate() {
            if self.label_set[..i].contains(l) {
                return Err(Error::config(format!("class '{l}' listed twice")));
            }
            let ls = self.lesions.get(l).ok_or_else(|| Error::config(format!("no lesion spec for class '{l}'")))?;
            if ls.count[0] > ls.count[1] {
                return Err(Error::config(format!("class '{l}': count range {:?} is reversed", ls.count)));
            }
            if !(ls.radius[0] > 0.0) || ls.radius[0] > ls.radius[1] {
                return Err(Error::config(format!("class '{l}': invalid radius range {:?}", ls.radius)));
            }
            if ls.radius[1] > min_extent / 2.0 {
                return Err(Error::config(format!(
                    "class '{l}': radius {} does not fit a volume of extent {} (max {})",
                    ls.radius[1],
                    min_extent,
                    min_extent / 2.0
                )));
            }
            if let Some(p) = &ls.inside {
                let parent = self
                    .lesions
                    .get(p)
                    .filter(|_| self.label_set.contains(p))
                    .ok_or_else(|| Error::config(format!("class '{l}' is inside unknown class '{p}'")))?;
                if parent.inside.is_some() {
                    return Err(Error::config(format!("class '{l}': nesting deeper than one level")));
                }
            }
        }
        if let Some(k) = self.lesions.keys().find(|k| !self.label_set.contains(k)) {
            return Err(Error::config(format!("lesion spec for '{k}' which is not in label_set")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SPEC: &str = r#"
domain_id = 1
name = "b"
n_modalities = 1
intensity_mean = [2.0]
intensity_std = [1.0]
noise_std = 0.5
label_set = ["core", "halo"]
volume_shape = [24, 24, 24]
seed = 7

[lesions.halo]
count = [1, 2]
radius = [5.0, 7.0]
offset = -1.0

[lesions.core]
count = [1, 1]
radius = [2.0, 3.0]
offset = 2.0
inside = "halo"
"#;

    #[test]
    fn parses_and_round_trips() {
        let s = DomainSpec::from_toml(SPEC).unwrap();
        assert_eq!(s.lesions["core"].inside.as_deref(), Some("halo"));
        let back = DomainSpec::from_toml(&s.to_toml()).unwrap();
        assert_eq!(s, back);
        assert_eq!(s.hash(), back.hash());
    }

    #[test]
    fn infeasible_geometry_is_rejected() {
        let bad = SPEC.replace("radius = [5.0, 7.0]", "radius = [5.0, 13.0]");
        let err = DomainSpec::from_toml(&bad).unwrap_err().to_string();
        assert!(err.contains("does not fit"), "{err}");
        assert!(DomainSpec::from_toml(&SPEC.replace("intensity_std = [1.0]", "intensity_std = [0.0]")).is_err());
        assert!(DomainSpec::from_toml(&SPEC.replace("inside = \"halo\"", "inside = \"x\"")).is_err());
        assert!(DomainSpec::from_toml(&SPEC.replace("seed = 7", "seed = 7\nbogus = 1")).is_err());
    }
}
