//! Evaluation against sparse ground truth.
//!
//! Ground-truth voxels coded [`UNLABELED`] carry no information: they are
//! excluded from every count, whatever the prediction says there.

use std::fmt::Write as _;
use std::path::Path;

use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::volume::{LabelSchema, LabelVolume, BACKGROUND, UNLABELED};

/// Fraction of ground-truth voxels of `class` that the prediction labels
/// `class`; `None` when the class is absent from the ground truth.
pub fn tpr_per_class(pred: &LabelVolume, gt: &LabelVolume, class: u8) -> Result<Option<f64>> {
    pred.same_dims(gt)?;
    let (hits, total) = class_counts(pred, gt, class);
    Ok((total > 0).then(|| hits as f64 / total as f64))
}

fn class_counts(pred: &LabelVolume, gt: &LabelVolume, class: u8) -> (usize, usize) {
    let mut hits = 0;
    let mut total = 0;
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        if g == class && g != UNLABELED {
            total += 1;
            hits += usize::from(p == class);
        }
    }
    (hits, total)
}

/// Volume-weighted average of per-class TPRs; weights are ground-truth
/// volumes and classes absent from the ground truth are skipped.
pub fn vwa_tpr(pred: &LabelVolume, gt: &LabelVolume, classes: &[u8]) -> Result<f64> {
    pred.same_dims(gt)?;
    let mut volumes = Vec::new();
    let mut tprs = Vec::new();
    for &c in classes {
        let (hits, total) = class_counts(pred, gt, c);
        if total > 0 {
            volumes.push(total as f64);
            tprs.push(hits as f64 / total as f64);
        }
    }
    weighted_average(&volumes, &tprs)
}

/// `Σ w_i t_i / Σ w_i`.
pub fn weighted_average(weights: &[f64], values: &[f64]) -> Result<f64> {
    if weights.len() != values.len() {
        return Err(Error::invalid("weights and values differ in length"));
    }
    let total: f64 = weights.iter().sum();
    if weights.is_empty() || !(total > 0.0) {
        return Err(Error::invalid("no class with positive ground-truth volume"));
    }
    Ok(weights.iter().zip(values).map(|(w, v)| w * v).sum::<f64>() / total)
}

/// Dice overlap of `class` between two segmentations. Voxels unlabeled in
/// either volume are ignored; two empty sets score 1.
pub fn dice(a: &LabelVolume, b: &LabelVolume, class: u8) -> Result<f64> {
    a.same_dims(b)?;
    let (mut na, mut nb, mut both) = (0, 0, 0);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        if x == UNLABELED || y == UNLABELED {
            continue;
        }
        na += usize::from(x == class);
        nb += usize::from(y == class);
        both += usize::from(x == class && y == class);
    }
    Ok(dice_from_counts(na, nb, both))
}

/// `2|A∩B| / (|A| + |B|)`, with 1 for two empty sets.
pub fn dice_from_counts(size_a: usize, size_b: usize, overlap: usize) -> f64 {
    if size_a + size_b == 0 {
        1.0
    } else {
        2.0 * overlap as f64 / (size_a + size_b) as f64
    }
}

/// Sample standard deviation over mean, as a fraction (0.1 is 10%).
pub fn coefficient_of_variation(values: &[f64]) -> Result<f64> {
    if values.len() < 2 {
        return Err(Error::invalid("coefficient of variation needs at least 2 values"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if !(mean > 0.0) {
        return Err(Error::invalid(format!("mean {mean} must be positive")));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(var.sqrt() / mean)
}

/// Partition of nucleus codes into named groups. Group `k` (0-based, in
/// definition order) is coded `k + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupMapping {
    groups: Vec<(String, Vec<u8>)>,
}

impl Default for GroupMapping {
    /// Seven major groups; the membership is a convention.
    fn default() -> Self {
        let g = |name: &str, codes: &[u8]| (name.to_string(), codes.to_vec());
        GroupMapping {
            groups: vec![
                g("Anterior", &[1, 4]),
                g("Medial", &[6]),
                g("Midline", &[2, 3]),
                g("Ventral Anterior", &[9]),
                g("Ventral Posterior", &[12, 13]),
                g("Ventral Lateral", &[10, 11]),
                g("Posterior", &[5, 7, 8]),
            ],
        }
    }
}

impl GroupMapping {
    pub fn new(groups: Vec<(String, Vec<u8>)>, schema: &LabelSchema) -> Result<Self> {
        let mut seen = vec![false; 256];
        for (name, codes) in &groups {
            if codes.is_empty() {
                return Err(Error::Schema(format!("group {name:?} has no members")));
            }
            for &c in codes {
                if schema.abbreviation(c).is_none() {
                    return Err(Error::Schema(format!("group {name:?} lists unknown nucleus code {c}")));
                }
                if std::mem::replace(&mut seen[c as usize], true) {
                    return Err(Error::Schema(format!("nucleus code {c} assigned to more than one group")));
                }
            }
        }
        if let Some(c) = schema.codes().find(|&c| !seen[c as usize]) {
            return Err(Error::Schema(format!("nucleus code {c} is not assigned to any group")));
        }
        if groups.len() >= UNLABELED as usize {
            return Err(Error::Schema("too many groups".into()));
        }
        Ok(GroupMapping { groups })
    }

    /// One singleton group per nucleus, named by abbreviation.
    pub fn identity(schema: &LabelSchema) -> Self {
        GroupMapping {
            groups: schema.nuclei().iter().map(|n| (n.abbreviation.clone(), vec![n.code])).collect(),
        }
    }

    /// Parse `{"groups": {"Name": [codes], ...}}`, keeping the file order.
    pub fn from_json(text: &str, schema: &LabelSchema) -> Result<Self> {
        let root: Value = serde_json::from_str(text)?;
        let groups = root
            .get("groups")
            .and_then(Value::as_object)
            .ok_or_else(|| Error::Schema("mapping needs a \"groups\" object".into()))?;
        let mut out = Vec::with_capacity(groups.len());
        for (name, codes) in groups {
            let codes: Vec<u8> = serde_json::from_value(codes.clone())
                .map_err(|_| Error::Schema(format!("group {name:?} must list integer codes 1..13")))?;
            out.push((name.clone(), codes));
        }
        Self::new(out, schema)
    }

    pub fn load(path: impl AsRef<Path>, schema: &LabelSchema) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, schema)
    }

    pub fn to_json(&self) -> String {
        let mut groups = Map::new();
        for (name, codes) in &self.groups {
            groups.insert(name.clone(), Value::from(codes.clone()));
        }
        let mut root = Map::new();
        root.insert("groups".into(), Value::Object(groups));
        serde_json::to_string_pretty(&Value::Object(root)).expect("plain JSON values")
    }

    pub fn groups(&self) -> &[(String, Vec<u8>)] {
        &self.groups
    }

    pub fn group_codes(&self) -> Vec<u8> {
        (1..=self.groups.len() as u8).collect()
    }

    pub fn group_of(&self, code: u8) -> Option<u8> {
        self.groups.iter().position(|(_, codes)| codes.contains(&code)).map(|k| k as u8 + 1)
    }

    fn lookup(&self) -> [Option<u8>; 256] {
        let mut table = [None; 256];
        for (k, (_, codes)) in self.groups.iter().enumerate() {
            for &c in codes {
                table[c as usize] = Some(k as u8 + 1);
            }
        }
        table
    }
}

/// Replace nucleus codes by group codes; background and unlabeled are kept.
pub fn apply_group_mapping(seg: &LabelVolume, m: &GroupMapping) -> Result<LabelVolume> {
    let table = m.lookup();
    let mut out = Vec::with_capacity(seg.len());
    for (i, &c) in seg.data().iter().enumerate() {
        out.push(match c {
            BACKGROUND | UNLABELED => c,
            _ => table[c as usize].ok_or(Error::LabelOutOfRange { code: c as u32, offset: i })?,
        });
    }
    Ok(seg.same_grid(out))
}

fn report_rows(
    csv: &mut String,
    level: &str,
    entries: &[(String, u8)],
    pred: &LabelVolume,
    gt: &LabelVolume,
) -> Result<()> {
    let mut volumes = Vec::new();
    let mut tprs = Vec::new();
    for (name, code) in entries {
        let (hits, total) = class_counts(pred, gt, *code);
        let predicted = pred.count(*code);
        let tpr = if total > 0 {
            volumes.push(total as f64);
            tprs.push(hits as f64 / total as f64);
            format!("{:.6}", hits as f64 / total as f64)
        } else {
            "NA".into()
        };
        writeln!(csv, "{level},{name},{code},{total},{predicted},{tpr}").expect("string write");
    }
    let vwa = match weighted_average(&volumes, &tprs) {
        Ok(v) => format!("{v:.6}"),
        Err(_) => "NA".into(),
    };
    let total: f64 = volumes.iter().sum();
    writeln!(csv, "{level},VWA,,{total},,{vwa}").expect("string write");
    Ok(())
}

/// CSV with one row per nucleus and per group plus a VWA row for each
/// level. Columns: `level,name,code,gt_volume,pred_volume,tpr`; classes
/// absent from the ground truth show `NA`.
pub fn metrics_report(
    pred: &LabelVolume,
    gt: &LabelVolume,
    schema: &LabelSchema,
    mapping: &GroupMapping,
) -> Result<String> {
    pred.same_dims(gt)?;
    let mut csv = String::from("level,name,code,gt_volume,pred_volume,tpr\n");
    let classes: Vec<(String, u8)> = schema.nuclei().iter().map(|n| (n.abbreviation.clone(), n.code)).collect();
    report_rows(&mut csv, "class", &classes, pred, gt)?;
    let gp = apply_group_mapping(pred, mapping)?;
    let gg = apply_group_mapping(gt, mapping)?;
    let groups: Vec<(String, u8)> = mapping
        .groups()
        .iter()
        .enumerate()
        .map(|(k, (name, _))| (name.clone(), k as u8 + 1))
        .collect();
    report_rows(&mut csv, "group", &groups, &gp, &gg)?;
    Ok(csv)
}

pub fn write_metrics_report(
    pred: &LabelVolume,
    gt: &LabelVolume,
    schema: &LabelSchema,
    mapping: &GroupMapping,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let csv = metrics_report(pred, gt, schema, mapping)?;
    std::fs::write(path, csv).map_err(|e| Error::io(path, e))
}
