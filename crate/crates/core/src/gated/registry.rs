use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Name of the shared channel every domain supervises.
pub const BACKGROUND: &str = "background";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainDescriptor {
    pub id: usize,
    pub name: String,
    /// Foreground classes in this domain's own order; background is implicit.
    pub labels: Vec<String>,
}

/// Ordered union label space over domains with unaligned class sets.
///
/// Channel 0 of the union is always [`BACKGROUND`] and belongs to every
/// domain's mask. Remaining channels follow first appearance across domains.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<DomainDescriptor>", into = "Vec<DomainDescriptor>")]
pub struct DomainRegistry {
    domains: Vec<DomainDescriptor>,
    union_labels: Vec<String>,
    masks: Vec<Vec<bool>>,
}

impl DomainRegistry {
    /// Builds a registry from `(name, labels)` pairs; ids follow list order.
    pub fn new<S: AsRef<str>>(domains: &[(S, Vec<S>)]) -> Result<Self> {
        let descs: Vec<DomainDescriptor> = domains
            .iter()
            .enumerate()
            .map(|(id, (name, labels))| DomainDescriptor {
                id,
                name: name.as_ref().to_string(),
                labels: labels.iter().map(|l| l.as_ref().to_string()).collect(),
            })
            .collect();
        Self::try_from(descs)
    }

    pub fn n_domains(&self) -> usize {
        self.domains.len()
    }

    pub fn n_classes(&self) -> usize {
        self.union_labels.len()
    }

    pub fn domains(&self) -> &[DomainDescriptor] {
        &self.domains
    }

    pub fn union_labels(&self) -> &[String] {
        &self.union_labels
    }

    pub fn domain(&self, id: usize) -> Result<&DomainDescriptor> {
        self.domains.get(id).ok_or_else(|| {
            Error::config(format!("unknown domain id {id} (registry has {} domains)", self.domains.len()))
        })
    }

    pub fn domain_id(&self, name: &str) -> Result<usize> {
        self.domains
            .iter()
            .position(|d| d.name == name)
            .ok_or_else(|| Error::config(format!("unknown domain '{name}'")))
    }

    pub fn mask(&self, id: usize) -> Result<&[bool]> {
        self.domain(id)?;
        Ok(&self.masks[id])
    }

    pub fn channel(&self, label: &str) -> Option<usize> {
        self.union_labels.iter().position(|l| l == label)
    }

    /// Union channel of the `k`-th local class of domain `id` (local 0 is
    /// background).
    pub fn local_to_union(&self, id: usize, local: usize) -> Result<usize> {
        let d = self.domain(id)?;
        if local == 0 {
            return Ok(0);
        }
        let label = d
            .labels
            .get(local - 1)
            .ok_or_else(|| Error::Data(format!("label value {local} outside domain '{}' label set", d.name)))?;
        Ok(self.channel(label).expect("registry invariant: every domain label is in the union"))
    }
}

impl TryFrom<Vec<DomainDescriptor>> for DomainRegistry {
    type Error = Error;

    fn try_from(domains: Vec<DomainDescriptor>) -> Result<Self> {
        if domains.is_empty() {
            return Err(Error::config("registry needs at least one domain"));
        }
        let mut union_labels = vec![BACKGROUND.to_string()];
        for (k, d) in domains.iter().enumerate() {
            if d.id != k {
                return Err(Error::config(format!("domain '{}' has id {} but sits at position {k}", d.name, d.id)));
            }
            if domains[..k].iter().any(|o| o.name == d.name) {
                return Err(Error::config(format!("duplicate domain name '{}'", d.name)));
            }
            for (i, l) in d.labels.iter().enumerate() {
                if l == BACKGROUND {
                    return Err(Error::config(format!("domain '{}': '{BACKGROUND}' is implicit", d.name)));
                }
                if d.labels[..i].contains(l) {
                    return Err(Error::config(format!("domain '{}' lists class '{l}' twice", d.name)));
                }
                if !union_labels.contains(l) {
                    union_labels.push(l.clone());
                }
            }
        }
        let masks = domains
            .iter()
            .map(|d| union_labels.iter().enumerate().map(|(k, l)| k == 0 || d.labels.contains(l)).collect())
            .collect();
        Ok(DomainRegistry { domains, union_labels, masks })
    }
}

impl From<DomainRegistry> for Vec<DomainDescriptor> {
    fn from(r: DomainRegistry) -> Self {
        r.domains
    }
}

/// Union channels of the domain's own classes (background excluded); the
/// training loss covers these plus channel 0.
pub fn masked_loss_channels(domain: usize, registry: &DomainRegistry) -> Result<Vec<usize>> {
    let mask = registry.mask(domain)?;
    Ok((1..mask.len()).filter(|&k| mask[k]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn union_keeps_first_appearance_order() {
        let r = DomainRegistry::new(&[("a", vec!["lesion"]), ("b", vec!["core", "lesion", "halo"])]).unwrap();
        assert_eq!(r.union_labels(), ["background", "lesion", "core", "halo"]);
        assert_eq!(r.mask(0).unwrap(), [true, true, false, false]);
        assert_eq!(r.mask(1).unwrap(), [true, true, true, true]);
        assert_eq!(r.local_to_union(1, 3).unwrap(), 3);
        assert_eq!(r.local_to_union(1, 2).unwrap(), 1);
    }

    #[test]
    fn rejects_bad_sets() {
        assert!(DomainRegistry::new::<&str>(&[]).is_err());
        assert!(DomainRegistry::new(&[("a", vec!["x", "x"])]).is_err());
        assert!(DomainRegistry::new(&[("a", vec!["background"])]).is_err());
        assert!(DomainRegistry::new(&[("a", vec!["x"]), ("a", vec!["y"])]).is_err());
    }

    #[test]
    fn json_round_trip_validates() {
        let r = DomainRegistry::new(&[("a", vec!["x"]), ("b", vec!["y", "z"])]).unwrap();
        let s = serde_json::to_string(&r).unwrap();
        let back: DomainRegistry = serde_json::from_str(&s).unwrap();
        assert_eq!(r, back);
        let bad = s.replace("\"z\"", "\"y\"");
        assert!(serde_json::from_str::<DomainRegistry>(&bad).is_err());
    }

    #[test]
    fn loss_channels() {
        let r = DomainRegistry::new(&[("a", vec!["a", "b"]), ("b", vec!["b", "c"]), ("c", vec!["d"])]).unwrap();
        assert_eq!(masked_loss_channels(0, &r).unwrap(), [1, 2]);
        assert_eq!(masked_loss_channels(1, &r).unwrap(), [2, 3]);
        assert_eq!(masked_loss_channels(2, &r).unwrap(), [4]);
        assert!(masked_loss_channels(3, &r).is_err());
    }
}
