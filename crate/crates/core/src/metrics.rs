//! Overlap, landmark and topology metrics.

use serde::ser::{SerializeMap, Serializer};
use serde::Serialize;

use crate::error::{invalid, mismatch, Result};
use crate::grid::{is_interior, jacobian_determinant, DisplacementField, Spacing, Volume};
use crate::io::LandmarkSet;

pub const DEFAULT_CPM_THRESHOLDS: [f64; 4] = [0.5, 1.0, 2.0, 5.0];

/// Integer label volume; 0 is background.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMask {
    volume: Volume,
    labels: Vec<u32>,
}

impl LabelMask {
    /// Wrap a volume of non-negative integers. With no label table, every
    /// nonzero value present becomes a label.
    pub fn new(volume: Volume, table: Option<Vec<u32>>) -> Result<Self> {
        let mut present = vec![];
        for &v in volume.data() {
            if !(v >= 0.0) || v.fract() != 0.0 || v > u32::MAX as f64 {
                return Err(invalid(format!("mask value {v} is not a label")));
            }
            let l = v as u32;
            if l != 0 && !present.contains(&l) {
                present.push(l);
            }
        }
        present.sort_unstable();
        let labels = match table {
            Some(mut t) => {
                if let Some(l) = present.iter().find(|l| !t.contains(l)) {
                    return Err(invalid(format!("label {l} is not in the label table")));
                }
                t.sort_unstable();
                t.dedup();
                t.retain(|&l| l != 0);
                t
            }
            None => present,
        };
        Ok(LabelMask { volume, labels })
    }

    pub fn volume(&self) -> &Volume {
        &self.volume
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiceScores {
    /// Labels present in at least one of the two masks.
    pub per_label: Vec<(u32, f64)>,
    pub mean: Option<f64>,
}

/// Per-label Dice between a fixed mask and a (nearest-neighbour) warped
/// moving mask over the union of both label tables.
pub fn dice(fixed: &LabelMask, warped: &LabelMask) -> Result<DiceScores> {
    if fixed.volume.dims() != warped.volume.dims() {
        return Err(mismatch(format!("mask dims {:?} vs {:?}", fixed.volume.dims(), warped.volume.dims())));
    }
    let mut labels: Vec<u32> = fixed.labels.iter().chain(&warped.labels).copied().collect();
    labels.sort_unstable();
    labels.dedup();
    let mut per_label = vec![];
    for l in labels {
        let lf = l as f64;
        let (mut a, mut b, mut both) = (0usize, 0usize, 0usize);
        for (&x, &y) in fixed.volume.data().iter().zip(warped.volume.data()) {
            let (ia, ib) = (x == lf, y == lf);
            a += ia as usize;
            b += ib as usize;
            both += (ia && ib) as usize;
        }
        if a + b > 0 {
            per_label.push((l, 2.0 * both as f64 / (a + b) as f64));
        }
    }
    let mean = if per_label.is_empty() {
        None
    } else {
        Some(per_label.iter().map(|p| p.1).sum::<f64>() / per_label.len() as f64)
    };
    Ok(DiceScores { per_label, mean })
}

/// Distance in mm between `x_fix + u(x_fix)` and the paired moving landmark.
pub fn tre(fixed: &LandmarkSet, moving: &LandmarkSet, u: &DisplacementField, spacing: Spacing) -> Result<Vec<f64>> {
    if fixed.len() != moving.len() {
        return Err(mismatch(format!("{} fixed vs {} moving landmarks", fixed.len(), moving.len())));
    }
    fixed
        .points
        .iter()
        .zip(&moving.points)
        .map(|(p, q)| {
            let d = u.sample(*p)?;
            let e: f64 = (0..3).map(|a| ((p[a] + d[a] - q[a]) * spacing[a]).powi(2)).sum();
            Ok(e.sqrt())
        })
        .collect()
}

/// Percentage of interior voxels whose Jacobian determinant is <= 0.
pub fn nonpositive_jacobian_pct(u: &DisplacementField) -> f64 {
    let dims = u.dims();
    let det = jacobian_determinant(u);
    let (mut bad, mut total) = (0usize, 0usize);
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                if is_interior(dims, x, y, z) {
                    total += 1;
                    bad += (det.get(x, y, z) <= 0.0) as usize;
                }
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        100.0 * bad as f64 / total as f64
    }
}

/// Percentage of landmarks with TRE at or below each threshold.
pub fn cpm(tre_mm: &[f64], thresholds_mm: &[f64]) -> Result<Vec<(f64, f64)>> {
    if tre_mm.is_empty() {
        return Err(invalid("CPM needs at least one TRE value"));
    }
    if thresholds_mm.iter().any(|t| !(*t > 0.0)) {
        return Err(invalid("CPM thresholds must be > 0"));
    }
    Ok(thresholds_mm
        .iter()
        .map(|&t| (t, 100.0 * tre_mm.iter().filter(|&&e| e <= t).count() as f64 / tre_mm.len() as f64))
        .collect())
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Ordered string-keyed map for stable JSON output.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct KeyedValues(pub Vec<(String, f64)>);

impl Serialize for KeyedValues {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut m = s.serialize_map(Some(self.0.len()))?;
        for (k, v) in &self.0 {
            m.serialize_entry(k, v)?;
        }
        m.end()
    }
}

/// Report with a fixed key set; metrics that were not computable are null.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub dsc_per_label: Option<KeyedValues>,
    pub dsc_mean: Option<f64>,
    pub tre_mm: Option<Vec<f64>>,
    pub tre_mean_mm: Option<f64>,
    pub tre_std_mm: Option<f64>,
    pub pct_nonpos_jac: f64,
    pub cpm: Option<KeyedValues>,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Landmark pairs in fixed and moving space.
#[derive(Clone, Copy, Debug)]
pub struct LandmarkPair<'a> {
    pub fixed: &'a LandmarkSet,
    pub moving: &'a LandmarkSet,
}

pub fn evaluate(
    u: &DisplacementField,
    spacing: Spacing,
    masks: Option<(&LabelMask, &LabelMask)>,
    landmarks: Option<LandmarkPair<'_>>,
    thresholds_mm: &[f64],
) -> Result<MetricsReport> {
    let mut report = MetricsReport {
        dsc_per_label: None,
        dsc_mean: None,
        tre_mm: None,
        tre_mean_mm: None,
        tre_std_mm: None,
        pct_nonpos_jac: nonpositive_jacobian_pct(u),
        cpm: None,
    };
    if let Some((fixed, warped)) = masks {
        let d = dice(fixed, warped)?;
        report.dsc_per_label = Some(KeyedValues(d.per_label.iter().map(|(l, v)| (l.to_string(), *v)).collect()));
        report.dsc_mean = d.mean;
    }
    if let Some(lm) = landmarks {
        let t = tre(lm.fixed, lm.moving, u, spacing)?;
        if !t.is_empty() {
            let (m, s) = mean_std(&t);
            report.tre_mean_mm = Some(m);
            report.tre_std_mm = Some(s);
            let c = cpm(&t, thresholds_mm)?;
            report.cpm = Some(KeyedValues(c.into_iter().map(|(k, v)| (format!("{k:?}"), v)).collect()));
        }
        report.tre_mm = Some(t);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::Frame;

    fn mask(dims: [usize; 3], on: &[usize], label: f64) -> LabelMask {
        let mut data = vec![0.0; dims[0] * dims[1] * dims[2]];
        for &i in on {
            data[i] = label;
        }
        LabelMask::new(Volume::new(dims, [1.0; 3], data).unwrap(), None).unwrap()
    }

    #[test]
    fn dice_closed_forms() {
        let a = mask([4, 2, 1], &[0, 1, 2, 3], 1.0);
        let b = mask([4, 2, 1], &[2, 3, 4, 5], 1.0);
        let c = mask([4, 2, 1], &[4, 5, 6, 7], 1.0);
        assert_eq!(dice(&a, &b).unwrap().per_label, vec![(1, 0.5)]);
        assert_eq!(dice(&a, &a).unwrap().mean, Some(1.0));
        assert_eq!(dice(&a, &c).unwrap().mean, Some(0.0));
    }

    #[test]
    fn dice_label_absent_from_one_mask_scores_zero() {
        let a = mask([4, 1, 1], &[0, 1], 1.0);
        let b = mask([4, 1, 1], &[0, 1], 2.0);
        let d = dice(&a, &b).unwrap();
        assert_eq!(d.per_label, vec![(1, 0.0), (2, 0.0)]);
        let empty = mask([4, 1, 1], &[], 1.0);
        assert_eq!(dice(&empty, &empty).unwrap().mean, None);
    }

    #[test]
    fn non_integer_mask_is_rejected() {
        let v = Volume::new([2, 1, 1], [1.0; 3], vec![0.0, 1.5]).unwrap();
        assert!(LabelMask::new(v, None).is_err());
    }

    #[test]
    fn tre_offsets() {
        let f = LandmarkSet::new(vec![[10.0, 10.0, 10.0]], Frame::Fixed);
        let m = LandmarkSet::new(vec![[13.0, 10.0, 10.0]], Frame::Moving);
        let shift = DisplacementField::constant([20; 3], [1.0; 3], [3.0, 0.0, 0.0]).unwrap();
        let zero = DisplacementField::zeros([20; 3], [1.0; 3]).unwrap();
        assert_eq!(tre(&f, &m, &shift, [1.0; 3]).unwrap(), vec![0.0]);
        assert_eq!(tre(&f, &m, &zero, [1.0; 3]).unwrap(), vec![3.0]);
        assert_eq!(tre(&f, &m, &zero, [2.0, 1.0, 1.0]).unwrap(), vec![6.0]);
        assert_eq!(tre(&f, &f, &zero, [1.0; 3]).unwrap(), vec![0.0]);
    }

    #[test]
    fn unpaired_landmarks_are_rejected() {
        let f = LandmarkSet::new(vec![[1.0; 3], [2.0; 3]], Frame::Fixed);
        let m = LandmarkSet::new(vec![[1.0; 3]], Frame::Moving);
        let zero = DisplacementField::zeros([4; 3], [1.0; 3]).unwrap();
        assert!(tre(&f, &m, &zero, [1.0; 3]).is_err());
    }

    #[test]
    fn jacobian_percentages() {
        let zero = DisplacementField::zeros([6; 3], [1.0; 3]).unwrap();
        assert_eq!(nonpositive_jacobian_pct(&zero), 0.0);
        let fold = DisplacementField::from_fn([6; 3], [1.0; 3], |x, _, _| [-2.0 * x as f64, 0.0, 0.0]).unwrap();
        assert_eq!(nonpositive_jacobian_pct(&fold), 100.0);
    }

    #[test]
    fn cpm_counts() {
        let c = cpm(&[0.4, 0.9, 1.5, 6.0], &DEFAULT_CPM_THRESHOLDS).unwrap();
        assert_eq!(c, vec![(0.5, 25.0), (1.0, 50.0), (2.0, 75.0), (5.0, 75.0)]);
        assert!(cpm(&[0.0; 3], &[0.5]).unwrap().iter().all(|p| p.1 == 100.0));
        assert!(cpm(&[], &[1.0]).is_err());
    }

    #[test]
    fn report_keys_are_fixed() {
        let f = LandmarkSet::new(vec![[1.0; 3]], Frame::Fixed);
        let zero = DisplacementField::zeros([4; 3], [1.0; 3]).unwrap();
        let r = evaluate(&zero, [1.0; 3], None, Some(LandmarkPair { fixed: &f, moving: &f }), &DEFAULT_CPM_THRESHOLDS)
            .unwrap();
        let v: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        let keys: Vec<&String> = v.as_object().unwrap().keys().collect();
        assert_eq!(keys.len(), 7);
        assert!(v["dsc_mean"].is_null());
        let cpm_keys: Vec<String> = v["cpm"].as_object().unwrap().keys().cloned().collect();
        assert_eq!(cpm_keys, vec!["0.5", "1.0", "2.0", "5.0"]);
    }
}
