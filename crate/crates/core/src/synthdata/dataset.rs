//! On-disk dataset layout: `<root>/<domain>/img_<i>.pgm`,
//! `<root>/<domain>/msk_<i>.pgm` and `<root>/domains.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::domain::{generate_range, DomainSpec, Sample};
use super::pgm::{read_image, read_mask, write_image, write_mask};
use crate::error::{Error, Result};

pub const DOMAINS_FILE: &str = "domains.json";

/// One domain of a dataset and the sample indices it covers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainPlan {
    pub spec: DomainSpec,
    #[serde(default)]
    pub start: usize,
    pub count: usize,
}

/// Everything needed to regenerate a dataset; stored as `domains.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetPlan {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub domains: Vec<DomainPlan>,
}

impl DatasetPlan {
    pub fn validate(&self) -> Result<()> {
        if self.domains.is_empty() {
            return Err(Error::Config("dataset has no domains".into()));
        }
        for (i, d) in self.domains.iter().enumerate() {
            d.spec.validate()?;
            if d.count == 0 {
                return Err(Error::Config(format!("domain {:?} has no samples", d.spec.name)));
            }
            if self.domains[..i].iter().any(|o| o.spec.name == d.spec.name) {
                return Err(Error::Config(format!("domain {:?} listed twice", d.spec.name)));
            }
        }
        Ok(())
    }

    pub fn domain(&self, name: &str) -> Result<&DomainPlan> {
        self.domains
            .iter()
            .find(|d| d.spec.name == name)
            .ok_or_else(|| Error::Config(format!("unknown domain {name:?}")))
    }

    pub fn generate_domain(&self, name: &str) -> Result<Vec<Sample>> {
        let d = self.domain(name)?;
        generate_range(&d.spec, d.start, d.count, (self.height, self.width), self.seed)
    }
}

pub fn image_path(root: &Path, domain: &str, index: usize) -> PathBuf {
    root.join(domain).join(format!("img_{index}.pgm"))
}

pub fn mask_path(root: &Path, domain: &str, index: usize) -> PathBuf {
    root.join(domain).join(format!("msk_{index}.pgm"))
}

/// Generates every domain and writes the files plus `domains.json`.
pub fn write_dataset(root: &Path, plan: &DatasetPlan) -> Result<()> {
    plan.validate()?;
    for d in &plan.domains {
        let dir = root.join(&d.spec.name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for s in plan.generate_domain(&d.spec.name)? {
            write_image(&image_path(root, &s.domain, s.index), s.height, s.width, &s.image)?;
            write_mask(&mask_path(root, &s.domain, s.index), s.height, s.width, &s.mask)?;
        }
    }
    let text = serde_json::to_string_pretty(plan)
        .map_err(|e| Error::Contract(format!("domains.json serialization: {e}")))?;
    let path = root.join(DOMAINS_FILE);
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

pub fn read_plan(root: &Path) -> Result<DatasetPlan> {
    let path = root.join(DOMAINS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let plan: DatasetPlan = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    plan.validate()?;
    Ok(plan)
}

/// Reads one domain back from disk.
pub fn read_domain(root: &Path, name: &str) -> Result<Vec<Sample>> {
    let plan = read_plan(root)?;
    let d = plan.domain(name)?;
    (d.start..d.start + d.count)
        .map(|index| {
            let (h, w, image) = read_image(&image_path(root, name, index))?;
            let (mh, mw, mask) = read_mask(&mask_path(root, name, index))?;
            if (h, w) != (mh, mw) || (h, w) != (plan.height, plan.width) {
                return Err(Error::Format(format!(
                    "{name} sample {index}: image {h}x{w}, mask {mh}x{mw}, dataset {}x{}",
                    plan.height, plan.width
                )));
            }
            Ok(Sample {
                height: h,
                width: w,
                image,
                mask,
                domain: name.into(),
                index,
            })
        })
        .collect()
}
