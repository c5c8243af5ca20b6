use serde::{Deserialize, Serialize};

use super::volume::LabelMap;
use crate::error::{Error, Result};

/// `2|P ∩ G| / (|P| + |G|)` for one class; 1.0 when both sets are empty.
pub fn dsc(pred: &LabelMap, gt: &LabelMap, class_id: u16) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::invalid(format!("prediction {:?} and ground truth {:?} differ in shape", pred.shape(), gt.shape())));
    }
    let (mut p, mut g, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.data().iter().zip(gt.data()) {
        let (ia, ib) = (a == class_id, b == class_id);
        p += ia as usize;
        g += ib as usize;
        both += (ia && ib) as usize;
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (p + g) as f64)
}

/// One merge rule: every id in `sources` becomes `target`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeRule {
    pub sources: Vec<u16>,
    pub target: u16,
}

/// Validated list of merge rules.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MergeSpec(Vec<MergeRule>);

impl MergeSpec {
    /// Rejects specs whose application would not be idempotent: an id mapped to
    /// two targets, or a target that is itself rewritten elsewhere.
    pub fn new(rules: Vec<MergeRule>) -> Result<Self> {
        let mut map = std::collections::BTreeMap::new();
        for r in &rules {
            for &s in &r.sources {
                if let Some(&t) = map.get(&s) {
                    if t != r.target {
                        return Err(Error::config("merge", format!("label {s} is mapped to both {t} and {}", r.target)));
                    }
                }
                map.insert(s, r.target);
            }
        }
        for (&s, &t) in &map {
            if let Some(&tt) = map.get(&t) {
                if tt != t {
                    return Err(Error::config("merge", format!("target {t} of label {s} is itself rewritten to {tt}")));
                }
            }
        }
        Ok(MergeSpec(rules))
    }

    pub fn rules(&self) -> &[MergeRule] {
        &self.0
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let rules: Vec<MergeRule> = serde_json::from_str(text)?;
        Self::new(rules)
    }

    fn lookup(&self, max: u16) -> Vec<u16> {
        let mut lut: Vec<u16> = (0..=max).collect();
        for r in &self.0 {
            for &s in &r.sources {
                if (s as usize) < lut.len() {
                    lut[s as usize] = r.target;
                }
            }
        }
        lut
    }

    /// Class ids that survive the merge, among `0..num_classes`.
    pub fn surviving_classes(&self, num_classes: u16) -> Vec<u16> {
        let lut = self.lookup(num_classes.saturating_sub(1));
        let mut ids: Vec<u16> = lut.into_iter().collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

/// Rewrites every source id to its target; other ids are unchanged.
pub fn merge_labels(map: &LabelMap, spec: &MergeSpec) -> LabelMap {
    let lut = spec.lookup(map.max_label());
    let data = map.data().iter().map(|&v| lut[v as usize]).collect();
    LabelMap::new(map.shape(), data).expect("same shape")
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Evaluation {
    /// `(class id, DSC)` for every foreground class evaluated.
    pub per_class: Vec<(u16, f64)>,
    pub mean_foreground_dsc: f64,
}

/// Per-class DSC over `classes` (background excluded), optionally after merging
/// both maps.
pub fn evaluate(pred: &LabelMap, gt: &LabelMap, classes: &[u16], merge: Option<&MergeSpec>) -> Result<Evaluation> {
    let (p, g);
    let (pred, gt) = match merge {
        Some(m) => {
            p = merge_labels(pred, m);
            g = merge_labels(gt, m);
            (&p, &g)
        }
        None => (pred, gt),
    };
    let mut per_class = Vec::new();
    for &c in classes.iter().filter(|&&c| c != 0) {
        per_class.push((c, dsc(pred, gt, c)?));
    }
    let mean = if per_class.is_empty() {
        0.0
    } else {
        per_class.iter().map(|(_, d)| d).sum::<f64>() / per_class.len() as f64
    };
    Ok(Evaluation { per_class, mean_foreground_dsc: mean })
}

/// Mean foreground DSC pooled over several cases, averaged per case.
pub fn mean_dsc(pairs: &[(LabelMap, LabelMap)], classes: &[u16]) -> Result<f64> {
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (p, g) in pairs {
        total += evaluate(p, g, classes, None)?.mean_foreground_dsc;
    }
    Ok(total / pairs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(v: &[u16]) -> LabelMap {
        LabelMap::new([1, 1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn dsc_cases() {
        let a = map(&[1, 1, 0, 1, 0]);
        assert_eq!(dsc(&a, &a, 1).unwrap(), 1.0);
        assert_eq!(dsc(&map(&[1, 1, 0, 0]), &map(&[0, 0, 1, 1]), 1).unwrap(), 0.0);
        assert_eq!(dsc(&map(&[0, 0]), &map(&[0, 0]), 1).unwrap(), 1.0);
        assert_eq!(dsc(&map(&[1, 0]), &map(&[0, 0]), 1).unwrap(), 0.0);
        // |P| = 4, |G| = 4, overlap 2
        let p = map(&[1, 1, 1, 1, 0, 0]);
        let g = map(&[0, 0, 1, 1, 1, 1]);
        assert_eq!(dsc(&p, &g, 1).unwrap(), 0.5);
        assert_eq!(dsc(&g, &p, 1).unwrap(), 0.5);
    }

    #[test]
    fn merge_examples() {
        let spec = MergeSpec::new(vec![MergeRule { sources: vec![1, 2], target: 1 }]).unwrap();
        assert_eq!(merge_labels(&map(&[0, 1, 2, 1]), &spec).data(), &[0, 1, 1, 1]);
        let m = map(&[3, 0, 2]);
        assert_eq!(merge_labels(&m, &MergeSpec::default()), m);
        let once = merge_labels(&map(&[0, 1, 2, 3, 2]), &spec);
        assert_eq!(merge_labels(&once, &spec), once);
    }

    #[test]
    fn chained_specs_are_rejected() {
        let r = |s: Vec<u16>, t| MergeRule { sources: s, target: t };
        assert!(MergeSpec::new(vec![r(vec![1], 2), r(vec![2], 3)]).is_err());
        assert!(MergeSpec::new(vec![r(vec![1], 2), r(vec![1], 3)]).is_err());
        assert!(MergeSpec::new(vec![r(vec![1, 2], 1), r(vec![3, 4], 3)]).is_ok());
        assert!(MergeSpec::from_json(r#"[{"sources":[4,5],"target":4}]"#).is_ok());
    }

    #[test]
    fn surviving_classes_after_merge() {
        let spec = MergeSpec::new(vec![MergeRule { sources: vec![2, 3, 4], target: 2 }]).unwrap();
        assert_eq!(spec.surviving_classes(6), vec![0, 1, 2, 5]);
    }
}
