//! Voxel IOU, the per-session IOU matrix, i-IOU and backward transfer.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const IOU_THRESHOLD: f64 = 0.2;

/// IOU of `pred > t` against binary `gt`. Two empty sets count as a
/// perfect match.
pub fn voxel_iou(pred: &[f64], gt: &[bool], t: f64) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::contract(format!(
            "voxel_iou over {} predictions and {} labels",
            pred.len(),
            gt.len()
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        let on = p > t;
        inter += (on && g) as usize;
        union += (on || g) as usize;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// Lower-triangular table: `cell(i, j)` is the mean per-class IOU on session
/// `j`'s test data after training through session `i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IouMatrix {
    sessions: usize,
    rows: Vec<Option<Vec<f64>>>,
}

impl IouMatrix {
    pub fn new(sessions: usize) -> Self {
        IouMatrix {
            sessions,
            rows: vec![None; sessions],
        }
    }

    pub fn sessions(&self) -> usize {
        self.sessions
    }

    pub fn cell(&self, i: usize, j: usize) -> Option<f64> {
        self.rows.get(i)?.as_ref()?.get(j).copied()
    }

    pub fn row(&self, i: usize) -> Option<&[f64]> {
        self.rows.get(i)?.as_deref()
    }

    /// Index of the last populated row.
    pub fn last_row(&self) -> Option<usize> {
        self.rows.iter().rposition(Option::is_some)
    }

    /// Sets row `i` from per-session lists of per-class IOUs (sessions `0..=i`).
    pub fn update(&mut self, i: usize, per_class: &[Vec<f64>]) -> Result<()> {
        if i >= self.sessions {
            return Err(Error::contract(format!(
                "row {i} outside a {}-session matrix",
                self.sessions
            )));
        }
        if self.rows[i].is_some() {
            return Err(Error::contract(format!(
                "row {i} of the IOU matrix is already set"
            )));
        }
        if per_class.len() != i + 1 {
            return Err(Error::contract(format!(
                "row {i} needs {} sessions of IOUs, got {}",
                i + 1,
                per_class.len()
            )));
        }
        let mut row = Vec::with_capacity(i + 1);
        for (j, ious) in per_class.iter().enumerate() {
            if ious.is_empty() {
                return Err(Error::contract(format!("no class IOUs for session {j}")));
            }
            if ious.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::contract("IOU outside [0, 1]"));
            }
            row.push(ious.iter().sum::<f64>() / ious.len() as f64);
        }
        self.rows[i] = Some(row);
        Ok(())
    }

    fn final_row(&self) -> Result<&[f64]> {
        let t = self.sessions;
        if t == 0 {
            return Err(Error::contract("empty IOU matrix"));
        }
        self.row(t - 1).ok_or_else(|| {
            Error::contract(format!(
                "final row {} of the IOU matrix is not populated",
                t - 1
            ))
        })
    }

    /// `header trained_session,eval_session,mean_iou`, one line per cell.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("trained_session,eval_session,mean_iou\n");
        for (i, row) in self.rows.iter().enumerate() {
            for (j, v) in row.iter().flatten().enumerate() {
                let _ = writeln!(out, "{i},{j},{v:?}");
            }
        }
        out
    }

    pub fn from_csv(text: &str, sessions: usize) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("trained_session,eval_session,mean_iou") {
            return Err(Error::format("iou csv", "missing header"));
        }
        let mut cells: BTreeMap<usize, Vec<(usize, f64)>> = BTreeMap::new();
        for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = || Error::format("iou csv", format!("line {}: {line}", n + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 3 {
                return Err(bad());
            }
            let i: usize = f[0].trim().parse().map_err(|_| bad())?;
            let j: usize = f[1].trim().parse().map_err(|_| bad())?;
            let v: f64 = f[2].trim().parse().map_err(|_| bad())?;
            if i >= sessions || j > i {
                return Err(bad());
            }
            cells.entry(i).or_default().push((j, v));
        }
        let mut m = IouMatrix::new(sessions);
        for (i, mut row) in cells {
            row.sort_by_key(|c| c.0);
            if row.iter().enumerate().any(|(k, c)| c.0 != k) || row.len() != i + 1 {
                return Err(Error::format("iou csv", format!("row {i} is incomplete")));
            }
            m.rows[i] = Some(row.into_iter().map(|c| c.1).collect());
        }
        Ok(m)
    }
}

/// Mean of the final row.
pub fn incremental_iou(m: &IouMatrix) -> Result<f64> {
    let row = m.final_row()?;
    Ok(row.iter().sum::<f64>() / row.len() as f64)
}

/// `1/(T−1) Σ_{i<T−1} (IOU[T−1][i] − IOU[i][i])`.
pub fn backward_transfer(m: &IouMatrix) -> Result<f64> {
    let t = m.sessions();
    if t < 2 {
        return Err(Error::contract(format!(
            "backward transfer needs at least 2 sessions, got {t}"
        )));
    }
    let last = m.final_row()?;
    let mut acc = 0.0;
    for (i, final_iou) in last.iter().enumerate().take(t - 1) {
        let diag = m
            .cell(i, i)
            .ok_or_else(|| Error::contract(format!("diagonal cell {i} is not populated")))?;
        acc += final_iou - diag;
    }
    Ok(acc / (t - 1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub i_iou: f64,
    /// Absent when fewer than two sessions were run.
    pub bwt: Option<f64>,
    /// Final-row mean IOU per evaluated session.
    pub per_session: BTreeMap<String, f64>,
}

pub fn summarize(m: &IouMatrix) -> Result<MetricsSummary> {
    let last = m.final_row()?;
    Ok(MetricsSummary {
        i_iou: incremental_iou(m)?,
        bwt: if m.sessions() >= 2 {
            Some(backward_transfer(m)?)
        } else {
            None
        },
        per_session: last
            .iter()
            .enumerate()
            .map(|(j, v)| (format!("session_{j}"), *v))
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_examples() {
        let gt = [true, true, true, true, false, false, false, false];
        let pred = [0.9, 0.9, 0.0, 0.0, 0.9, 0.9, 0.0, 0.0];
        assert_eq!(voxel_iou(&pred, &gt, 0.2).unwrap(), 2.0 / 6.0);
        let exact: Vec<f64> = gt.iter().map(|&g| if g { 0.5 } else { 0.1 }).collect();
        assert_eq!(voxel_iou(&exact, &gt, 0.2).unwrap(), 1.0);
        let disjoint: Vec<f64> = gt.iter().map(|&g| if g { 0.0 } else { 1.0 }).collect();
        assert_eq!(voxel_iou(&disjoint, &gt, 0.2).unwrap(), 0.0);
        assert_eq!(voxel_iou(&[0.0; 4], &[false; 4], 0.2).unwrap(), 1.0);
        assert!(voxel_iou(&[0.0; 4], &[false; 8], 0.2).is_err());
        // Threshold is strict.
        assert_eq!(voxel_iou(&[0.2], &[true], 0.2).unwrap(), 0.0);
    }

    fn matrix(rows: &[&[f64]]) -> IouMatrix {
        let mut m = IouMatrix::new(rows.len());
        for (i, r) in rows.iter().enumerate() {
            let per: Vec<Vec<f64>> = r.iter().map(|&v| vec![v]).collect();
            m.update(i, &per).unwrap();
        }
        m
    }

    #[test]
    fn metric_formulas() {
        let m = matrix(&[&[0.7]]);
        assert_eq!(incremental_iou(&m).unwrap(), 0.7);
        assert!(matches!(backward_transfer(&m), Err(Error::Contract(_))));

        let m = matrix(&[&[0.7], &[0.6, 0.4]]);
        assert_eq!(incremental_iou(&m).unwrap(), 0.5);

        let m = matrix(&[&[0.6], &[0.58, 0.7], &[0.55, 0.65, 0.8]]);
        let expected = ((0.55 - 0.6) + (0.65 - 0.7)) / 2.0;
        assert_eq!(backward_transfer(&m).unwrap(), expected);
        assert!((expected + 0.05).abs() < 1e-12);

        let same = matrix(&[&[0.4], &[0.4, 0.4], &[0.4, 0.4, 0.4]]);
        assert_eq!(backward_transfer(&same).unwrap(), 0.0);
        assert!((incremental_iou(&same).unwrap() - 0.4).abs() < 1e-15);
        let better = matrix(&[&[0.4], &[0.6, 0.5]]);
        assert!(backward_transfer(&better).unwrap() > 0.0);
    }

    #[test]
    fn update_rules() {
        let mut m = IouMatrix::new(3);
        m.update(0, &[vec![0.5, 0.7]]).unwrap();
        assert_eq!(m.cell(0, 0), Some(0.6));
        assert_eq!(m.cell(0, 1), None);
        assert!(m.update(0, &[vec![0.1]]).is_err());
        assert!(m.update(1, &[vec![0.1]]).is_err());
        m.update(2, &[vec![0.1], vec![0.2], vec![0.3, 0.5]])
            .unwrap();
        assert_eq!(m.row(2).unwrap().len(), 3);
        assert!(incremental_iou(&IouMatrix::new(2)).is_err());
    }

    #[test]
    fn class_order_does_not_matter() {
        let mut a = IouMatrix::new(2);
        a.update(0, &[vec![0.25, 0.5]]).unwrap();
        a.update(1, &[vec![0.5, 0.25], vec![0.125, 0.75]]).unwrap();
        let mut b = IouMatrix::new(2);
        b.update(0, &[vec![0.5, 0.25]]).unwrap();
        b.update(1, &[vec![0.25, 0.5], vec![0.75, 0.125]]).unwrap();
        assert_eq!(incremental_iou(&a).unwrap(), incremental_iou(&b).unwrap());
        assert_eq!(
            backward_transfer(&a).unwrap(),
            backward_transfer(&b).unwrap()
        );
    }

    #[test]
    fn csv_round_trip_preserves_metrics() {
        let m = matrix(&[&[0.6], &[0.58, 0.7], &[0.55, 1.0 / 3.0, 0.8]]);
        let csv = m.to_csv();
        assert!(csv.starts_with("trained_session,eval_session,mean_iou\n0,0,0.6\n"));
        let back = IouMatrix::from_csv(&csv, 3).unwrap();
        assert_eq!(back, m);
        assert_eq!(
            incremental_iou(&back).unwrap(),
            incremental_iou(&m).unwrap()
        );
        assert_eq!(
            backward_transfer(&back).unwrap(),
            backward_transfer(&m).unwrap()
        );
        let s = summarize(&m).unwrap();
        assert_eq!(s.per_session["session_1"], 1.0 / 3.0);
        assert!(IouMatrix::from_csv("0,0,1\n", 1).is_err());
    }
}
