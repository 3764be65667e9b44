//! Where features come from: the synthetic task, a Speech Commands tree, or a feature cache.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use fxqat::features::{load_gsc, read_feature_cache, synth_dataset, Dataset, DatasetStats, FeatureSet, Split};
use fxqat::graph::ModelSpec;

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synth,
    Gsc(PathBuf),
    Cache(PathBuf),
}

impl FromStr for DataSource {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.split_once(':') {
            None if s == "synth" => Ok(Self::Synth),
            Some(("gsc", dir)) if !dir.is_empty() => Ok(Self::Gsc(dir.into())),
            Some(("cache", dir)) if !dir.is_empty() => Ok(Self::Cache(dir.into())),
            _ => Err(format!("expected `synth`, `gsc:<dir>` or `cache:<dir>`, got `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Arch {
    /// Narrow channels, sized for CPU training.
    Desk,
    /// Full-width channels.
    Reference,
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Feature source: `synth`, `gsc:<dir>` or `cache:<dir>`.
    #[arg(long, default_value = "synth")]
    pub data: DataSource,
    #[arg(long, default_value_t = 7)]
    pub synth_seed: u64,
    #[arg(long, default_value_t = 200)]
    pub synth_per_class: usize,
    #[arg(long, default_value_t = 4)]
    pub synth_classes: usize,
    /// Topology; defaults to desk for synthetic and cached data, reference for Speech Commands.
    #[arg(long, value_enum)]
    pub arch: Option<Arch>,
}

/// Raw (unstandardized) features of every split.
pub struct Splits {
    pub label_names: Vec<String>,
    pub train: FeatureSet,
    pub validation: FeatureSet,
    pub test: FeatureSet,
}

impl Splits {
    pub fn get(&self, split: Split) -> &FeatureSet {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }
}

pub fn cache_file(dir: &Path, split: Split) -> PathBuf {
    let name = match split {
        Split::Train => "train",
        Split::Validation => "validation",
        Split::Test => "test",
    };
    dir.join(format!("{name}.fxft"))
}

fn extract(ds: &Dataset) -> Result<Splits> {
    Ok(Splits {
        label_names: ds.labels.clone(),
        train: FeatureSet::extract(ds, Split::Train)?,
        validation: FeatureSet::extract(ds, Split::Validation)?,
        test: FeatureSet::extract(ds, Split::Test)?,
    })
}

impl DataArgs {
    pub fn load(&self) -> Result<Splits> {
        let splits = match &self.data {
            DataSource::Synth => extract(&synth_dataset(self.synth_seed, self.synth_per_class, self.synth_classes)?)?,
            DataSource::Gsc(dir) => extract(&load_gsc(dir)?)?,
            DataSource::Cache(dir) => {
                let mut sets = Vec::with_capacity(3);
                let mut names = Vec::new();
                for split in [Split::Train, Split::Validation, Split::Test] {
                    let path = cache_file(dir, split);
                    let file = File::open(&path).with_context(|| format!("opening {}", path.display()))?;
                    let (set, n) = read_feature_cache(BufReader::new(file))?;
                    if set.standardized || set.split != split {
                        bail!(fxqat::Error::Pipeline(format!("{} is not a raw {split:?} cache", path.display())));
                    }
                    names = n;
                    sets.push(set);
                }
                let test = sets.pop().expect("three splits");
                let validation = sets.pop().expect("three splits");
                let train = sets.pop().expect("three splits");
                Splits { label_names: names, train, validation, test }
            }
        };
        log::info!(
            "{} classes; {} train, {} validation, {} test inputs",
            splits.label_names.len(),
            splits.train.len(),
            splits.validation.len(),
            splits.test.len()
        );
        Ok(splits)
    }

    pub fn model_spec(&self, classes: usize) -> ModelSpec {
        let arch = self.arch.unwrap_or(match self.data {
            DataSource::Gsc(_) => Arch::Reference,
            _ => Arch::Desk,
        });
        match arch {
            Arch::Desk => ModelSpec::desk(classes),
            Arch::Reference => ModelSpec::reference(classes),
        }
    }
}

/// One split standardized with a model's frozen statistics, optionally truncated.
pub fn standardized(splits: &Splits, split: Split, stats: &DatasetStats, limit: Option<usize>) -> Result<FeatureSet> {
    let mut set = splits.get(split).standardize(stats)?;
    if let Some(n) = limit {
        set.inputs.truncate(n);
        set.labels.truncate(n);
    }
    if set.is_empty() {
        bail!(fxqat::Error::InvalidInput(format!("the {split:?} split is empty")));
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sources_parse() {
        assert_eq!("synth".parse::<DataSource>().unwrap(), DataSource::Synth);
        assert_eq!("gsc:/d".parse::<DataSource>().unwrap(), DataSource::Gsc("/d".into()));
        assert_eq!("cache:c".parse::<DataSource>().unwrap(), DataSource::Cache("c".into()));
        assert!("gsc:".parse::<DataSource>().is_err());
        assert!("wav".parse::<DataSource>().is_err());
    }
}
