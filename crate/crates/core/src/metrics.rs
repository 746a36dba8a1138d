//! Segmentation and temporal-localization metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check(op: &'static str, a: &[u8], b: &[u8]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(op, &[a.len()], &[b.len()]));
    }
    Ok(())
}

/// `|p ∩ g| / |p ∪ g|`, 1 when both masks are empty.
pub fn iou(pred: &[u8], gt: &[u8]) -> Result<f64> {
    check("iou", pred, gt)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        let (p, g) = (p != 0, g != 0);
        inter += usize::from(p && g);
        union += usize::from(p || g);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Fraction of pixels where the masks agree, foreground and background.
pub fn pixel_accuracy(pred: &[u8], gt: &[u8]) -> Result<f64> {
    check("pixel_accuracy", pred, gt)?;
    if pred.is_empty() {
        return Ok(1.0);
    }
    let same = pred.iter().zip(gt).filter(|(p, g)| (**p != 0) == (**g != 0)).count();
    Ok(same as f64 / pred.len() as f64)
}

/// Predictions and ground truth of one query over a clip.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalCase {
    pub name: String,
    /// Per-frame masks, one entry per evaluated frame.
    pub pred_masks: Vec<Vec<u8>>,
    pub gt_masks: Vec<Vec<u8>>,
    /// Frame indices into the mask lists.
    pub pred_segment: Vec<usize>,
    pub gt_segment: Vec<usize>,
}

impl EvalCase {
    fn validate(&self) -> Result<()> {
        if self.pred_masks.len() != self.gt_masks.len() {
            return Err(Error::Contract(format!(
                "{}: {} predicted frames vs {} ground-truth frames",
                self.name,
                self.pred_masks.len(),
                self.gt_masks.len()
            )));
        }
        let n = self.gt_masks.len();
        if self.pred_segment.iter().chain(&self.gt_segment).any(|&t| t >= n) {
            return Err(Error::Contract(format!("{}: segment frame out of range", self.name)));
        }
        Ok(())
    }

    /// Mean IoU and pixel accuracy over this case's frames.
    pub fn spatial(&self) -> Result<(f64, f64)> {
        self.validate()?;
        let mut s = (0.0, 0.0);
        for (p, g) in self.pred_masks.iter().zip(&self.gt_masks) {
            s.0 += iou(p, g)?;
            s.1 += pixel_accuracy(p, g)?;
        }
        let n = self.gt_masks.len().max(1) as f64;
        Ok((s.0 / n, s.1 / n))
    }

    /// Frame-level agreement of the segments, and mean IoU over ground-truth
    /// frames with missed frames scoring 0.
    pub fn temporal(&self) -> Result<(f64, f64)> {
        self.validate()?;
        let n = self.gt_masks.len();
        if n == 0 {
            return Err(Error::Contract(format!("{}: no frames", self.name)));
        }
        let agree = (0..n)
            .filter(|t| self.pred_segment.contains(t) == self.gt_segment.contains(t))
            .count();
        let acc = agree as f64 / n as f64;
        let viou = if self.gt_segment.is_empty() {
            if self.pred_segment.is_empty() { 1.0 } else { 0.0 }
        } else {
            let mut sum = 0.0;
            for &t in &self.gt_segment {
                if self.pred_segment.contains(&t) {
                    sum += iou(&self.pred_masks[t], &self.gt_masks[t])?;
                }
            }
            sum / self.gt_segment.len() as f64
        };
        Ok((acc, viou))
    }
}

/// Unweighted means of IoU and pixel accuracy over every (query, frame)
/// pair.
pub fn miou_macc(cases: &[EvalCase]) -> Result<(f64, f64)> {
    let mut s = (0.0, 0.0);
    let mut n = 0usize;
    for c in cases {
        c.validate()?;
        for (p, g) in c.pred_masks.iter().zip(&c.gt_masks) {
            s.0 += iou(p, g)?;
            s.1 += pixel_accuracy(p, g)?;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Contract("miou_macc needs at least one frame".into()));
    }
    Ok((s.0 / n as f64, s.1 / n as f64))
}

/// Per-query temporal accuracy and vIoU, averaged over queries.
pub fn acc_viou(cases: &[EvalCase]) -> Result<(f64, f64)> {
    if cases.is_empty() {
        return Err(Error::Contract("acc_viou needs at least one case".into()));
    }
    let mut s = (0.0, 0.0);
    for c in cases {
        let (a, v) = c.temporal()?;
        s.0 += a;
        s.1 += v;
    }
    let n = cases.len() as f64;
    Ok((s.0 / n, s.1 / n))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub query: String,
    pub miou: f64,
    pub macc: f64,
    pub acc: f64,
    pub viou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub miou: f64,
    pub macc: f64,
    pub acc: f64,
    pub viou: f64,
}

impl Report {
    pub fn from_cases(cases: &[EvalCase]) -> Result<Report> {
        let rows = cases
            .iter()
            .map(|c| {
                let (miou, macc) = c.spatial()?;
                let (acc, viou) = c.temporal()?;
                Ok(ReportRow {
                    query: c.name.clone(),
                    miou,
                    macc,
                    acc,
                    viou,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let (miou, macc) = miou_macc(cases)?;
        let (acc, viou) = acc_viou(cases)?;
        Ok(Report {
            rows,
            miou,
            macc,
            acc,
            viou,
        })
    }

    pub fn to_table(&self) -> String {
        let w = self.rows.iter().map(|r| r.query.len()).max().unwrap_or(0).max(7);
        let mut s = format!("{:<w$}  {:>6}  {:>6}  {:>6}  {:>6}\n", "query", "mIoU", "mAcc", "Acc", "vIoU");
        for r in &self.rows {
            s += &format!(
                "{:<w$}  {:>6.4}  {:>6.4}  {:>6.4}  {:>6.4}\n",
                r.query, r.miou, r.macc, r.acc, r.viou
            );
        }
        s += &format!(
            "{:<w$}  {:>6.4}  {:>6.4}  {:>6.4}  {:>6.4}\n",
            "average", self.miou, self.macc, self.acc, self.viou
        );
        s
    }
}
