//! Dataset file format: a two-line text header followed by one row per
//! sample.
//!
//! ```text
//! #cdnet-dataset v1
//! {header JSON: config, seed, classes, domains, label_tables}
//! <split>\t<y_d>\t<y_e>\t<v0> <v1> ...
//! ```
//! Floats are printed with Rust's shortest round-trip formatting, so
//! re-import reproduces every value bit-exactly and sampling from the
//! imported dataset matches the original given the same RNG seeds.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ClassSpec, DomainSpec, GenConfig, Sample, Split, SyntheticDataset};
use crate::error::{Error, Result};
use crate::numerics::Real;

const MAGIC: &str = "#cdnet-dataset v1";

#[derive(Serialize, Deserialize)]
struct Header {
    config: GenConfig,
    seed: u64,
    dtype: String,
    classes: Vec<ClassSpec>,
    domains: Vec<DomainSpec>,
    label_tables: Vec<Vec<String>>,
}

fn split_tag(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Test => "test",
    }
}

fn parse_split(tag: &str) -> Result<Split> {
    match tag {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        other => Err(Error::Format(format!("unknown split tag `{other}`"))),
    }
}

pub fn export_dataset(dataset: &SyntheticDataset, path: &Path) -> Result<()> {
    let header = Header {
        config: dataset.config.clone(),
        seed: dataset.seed,
        dtype: crate::numerics::DTYPE.to_string(),
        classes: dataset.classes.clone(),
        domains: dataset.domains.clone(),
        label_tables: dataset.label_tables.clone(),
    };
    let mut out = Vec::new();
    writeln!(out, "{MAGIC}")?;
    writeln!(out, "{}", serde_json::to_string(&header).expect("header json"))?;
    for (split, sample) in &dataset.samples {
        write!(out, "{}\t{}\t{}\t", split_tag(*split), sample.y_d, sample.y_e)?;
        for (i, v) in sample.raw.iter().enumerate() {
            if i > 0 {
                out.push(b' ');
            }
            write!(out, "{v}")?;
        }
        out.push(b'\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn import_dataset(path: &Path) -> Result<SyntheticDataset> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(line) if line == MAGIC => {}
        _ => return Err(Error::Format("dataset file: missing magic line".into())),
    }
    let header_line =
        lines.next().ok_or_else(|| Error::Format("dataset file: missing header".into()))?;
    let header: Header = serde_json::from_str(header_line)
        .map_err(|e| Error::Format(format!("dataset header parse error: {e}")))?;
    if header.dtype != crate::numerics::DTYPE {
        return Err(Error::Format(format!(
            "dataset stored as {}, this build uses {}",
            header.dtype,
            crate::numerics::DTYPE
        )));
    }

    let mut samples = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let bad = |what: &str| Error::Format(format!("dataset row {}: {what}", lineno + 3));
        let split = parse_split(fields.next().ok_or_else(|| bad("missing split"))?)?;
        let y_d: usize = fields
            .next()
            .ok_or_else(|| bad("missing domain label"))?
            .parse()
            .map_err(|_| bad("bad domain label"))?;
        let y_e: usize = fields
            .next()
            .ok_or_else(|| bad("missing class label"))?
            .parse()
            .map_err(|_| bad("bad class label"))?;
        let raw: Vec<Real> = fields
            .next()
            .ok_or_else(|| bad("missing feature vector"))?
            .split(' ')
            .map(|tok| tok.parse::<Real>().map_err(|_| bad("bad float")))
            .collect::<Result<_>>()?;
        if raw.len() != header.config.raw_dim {
            return Err(bad("feature vector length differs from raw_dim"));
        }
        samples.push((split, Sample { raw, y_e, y_d }));
    }

    let mut dataset = SyntheticDataset {
        config: header.config,
        seed: header.seed,
        classes: header.classes,
        domains: header.domains,
        label_tables: header.label_tables,
        samples,
        index: Default::default(),
    };
    dataset.rebuild_index();
    Ok(dataset)
}
