//! Confusion accumulation and generalized few-shot IoU metrics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taxonomy::{ClassId, Label, Role, Taxonomy};

/// Rows are ground truth, columns are predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    class_order: Vec<ClassId>,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(class_order: Vec<ClassId>) -> Self {
        let n = class_order.len();
        ConfusionMatrix {
            class_order,
            counts: vec![0; n * n],
        }
    }

    pub fn class_order(&self) -> &[ClassId] {
        &self.class_order
    }

    fn index(&self, c: ClassId) -> Result<usize> {
        self.class_order
            .iter()
            .position(|&k| k == c)
            .ok_or(Error::UnknownClass(c.0))
    }

    pub fn get(&self, truth: ClassId, pred: ClassId) -> u64 {
        match (self.index(truth), self.index(pred)) {
            (Ok(t), Ok(p)) => self.counts[t * self.class_order.len() + p],
            _ => 0,
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one count per point; points with an ignored truth are skipped.
    pub fn accumulate(&mut self, predictions: &[Label], truths: &[Label]) -> Result<()> {
        if predictions.len() != truths.len() {
            return Err(Error::LengthMismatch {
                expected: truths.len(),
                found: predictions.len(),
            });
        }
        let n = self.class_order.len();
        let mut delta = vec![0u64; n * n];
        for (p, t) in predictions.iter().zip(truths) {
            let Some(t) = t else { continue };
            let t = self.index(*t)?;
            let p = match p {
                Some(p) => self.index(*p)?,
                None => return Err(Error::Config("prediction carries the ignore label".into())),
            };
            delta[t * n + p] += 1;
        }
        for (c, d) in self.counts.iter_mut().zip(delta) {
            *c += d;
        }
        Ok(())
    }

    /// Commutative, associative merge of matrices over the same classes.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.class_order != other.class_order {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", self.class_order),
                got: format!("{:?}", other.class_order),
            });
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// IoU in percent; `None` when the class appears in neither truth nor prediction.
    pub fn iou(&self, c: ClassId) -> Result<Option<f64>> {
        let k = self.index(c)?;
        let n = self.class_order.len();
        let tp = self.counts[k * n + k];
        let fn_: u64 = (0..n).map(|j| self.counts[k * n + j]).sum::<u64>() - tp;
        let fp: u64 = (0..n).map(|i| self.counts[i * n + k]).sum::<u64>() - tp;
        let denom = tp + fp + fn_;
        Ok(if denom == 0 {
            None
        } else {
            Some(100.0 * tp as f64 / denom as f64)
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AbsentPolicy {
    /// Classes with an empty union are left out of every mean.
    #[default]
    Exclude,
    /// Classes with an empty union count as 0.
    Zero,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalOptions {
    /// Count the background class in the overall mIoU.
    #[serde(default)]
    pub include_background: bool,
    #[serde(default)]
    pub absent: AbsentPolicy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassIou {
    pub id: ClassId,
    pub name: String,
    pub role: Role,
    pub iou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub classes: Vec<ClassIou>,
    pub miou: Option<f64>,
    pub miou_base: Option<f64>,
    pub miou_novel: Option<f64>,
    pub points: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub manifest: Option<String>,
}

fn mean(values: impl Iterator<Item = Option<f64>>, absent: AbsentPolicy) -> Option<f64> {
    let vals: Vec<f64> = values
        .filter_map(|v| match (v, absent) {
            (Some(x), _) => Some(x),
            (None, AbsentPolicy::Zero) => Some(0.0),
            (None, AbsentPolicy::Exclude) => None,
        })
        .collect();
    if vals.is_empty() {
        None
    } else {
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// Per-class IoU with base, novel and overall means.
pub fn report(conf: &ConfusionMatrix, tax: &Taxonomy, opts: &EvalOptions) -> Result<EvalReport> {
    let mut classes = Vec::new();
    for c in tax.all_classes() {
        let role = if c == tax.background() {
            Role::Background
        } else if tax.is_base(c) {
            Role::Base
        } else {
            Role::Novel
        };
        classes.push(ClassIou {
            id: c,
            name: tax.name(c).to_string(),
            role,
            iou: conf.iou(c)?,
        });
    }
    let of_role = |r: Role| classes.iter().filter(move |c| c.role == r).map(|c| c.iou);
    let miou_base = mean(of_role(Role::Base), opts.absent);
    let miou_novel = mean(of_role(Role::Novel), opts.absent);
    let miou = mean(
        classes
            .iter()
            .filter(|c| c.role != Role::Background || opts.include_background)
            .map(|c| c.iou),
        opts.absent,
    );
    Ok(EvalReport {
        classes,
        miou,
        miou_base,
        miou_novel,
        points: conf.total(),
        manifest: None,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.1}")).unwrap_or_else(|| "-".into())
}

impl EvalReport {
    /// Per-class table, one `class,name,role,iou` line per class followed by the means.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,name,role,iou\n");
        for c in &self.classes {
            let role = match c.role {
                Role::Background => "background",
                Role::Base => "base",
                Role::Novel => "novel",
            };
            let iou = c.iou.map(|v| format!("{v:.6}")).unwrap_or_default();
            let _ = writeln!(s, "{},{},{},{}", c.id, c.name, role, iou);
        }
        for (k, v) in [
            ("miou_base", self.miou_base),
            ("miou_novel", self.miou_novel),
            ("miou", self.miou),
        ] {
            let _ = writeln!(
                s,
                ",{k},,{}",
                v.map(|v| format!("{v:.6}")).unwrap_or_default()
            );
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Summary row: method, mIoU_b, mIoU_n, mIoU.
    pub fn summary_table(&self, method: &str) -> String {
        format!(
            "{:<16} {:>8} {:>8} {:>8}\n{:<16} {:>8} {:>8} {:>8}\n",
            "method",
            "mIoU_b",
            "mIoU_n",
            "mIoU",
            method,
            fmt_opt(self.miou_base),
            fmt_opt(self.miou_novel),
            fmt_opt(self.miou)
        )
    }

    /// One column per class plus the overall mean.
    pub fn per_class_table(&self, method: &str) -> String {
        let mut head = format!("{:<16}", "method");
        let mut row = format!("{method:<16}");
        for c in self.classes.iter().filter(|c| c.role != Role::Background) {
            let w = c.name.len().max(6);
            let _ = write!(head, " {:>w$}", c.name);
            let _ = write!(row, " {:>w$}", fmt_opt(c.iou));
        }
        let _ = write!(head, " {:>6}", "mIoU");
        let _ = write!(row, " {:>6}", fmt_opt(self.miou));
        format!("{head}\n{row}\n")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::ClassDef;

    const U: ClassId = ClassId(0);
    const A: ClassId = ClassId(1);
    const B: ClassId = ClassId(2);

    fn tax() -> Taxonomy {
        let d = |id, role| ClassDef {
            id: ClassId(id),
            name: format!("c{id}"),
            role,
            raw_ids: vec![id],
        };
        Taxonomy::new(
            &[d(0, Role::Background), d(1, Role::Base), d(2, Role::Novel)],
            &[],
        )
        .unwrap()
    }

    #[test]
    fn accumulate_cases() {
        let mut m = ConfusionMatrix::new(vec![U, A, B]);
        m.accumulate(&[], &[]).unwrap();
        assert_eq!(m.total(), 0);
        m.accumulate(&[Some(A); 5], &[Some(A); 5]).unwrap();
        assert_eq!(m.get(A, A), 5);
        m.accumulate(&[Some(B)], &[None]).unwrap();
        assert_eq!(m.total(), 5);
        assert!(m.accumulate(&[Some(ClassId(9))], &[Some(A)]).is_err());
        assert!(m.accumulate(&[Some(A)], &[]).is_err());
    }

    #[test]
    fn iou_cases() {
        let mut m = ConfusionMatrix::new(vec![U, A, B]);
        m.accumulate(&[Some(A), Some(U)], &[Some(A), Some(A)])
            .unwrap();
        assert_eq!(m.iou(A).unwrap(), Some(50.0));
        assert_eq!(m.iou(B).unwrap(), None);

        let mut p = ConfusionMatrix::new(vec![U, A, B]);
        p.accumulate(&[Some(A)], &[Some(A)]).unwrap();
        assert_eq!(p.iou(A).unwrap(), Some(100.0));
    }

    #[test]
    fn report_cases() {
        let t = tax();
        let mut m = ConfusionMatrix::new(t.all_classes());
        m.accumulate(&[Some(A), Some(B), Some(U)], &[Some(A), Some(B), Some(U)])
            .unwrap();
        let r = report(&m, &t, &EvalOptions::default()).unwrap();
        assert!(r.classes.iter().all(|c| c.iou == Some(100.0)));
        assert_eq!(
            (r.miou, r.miou_base, r.miou_novel),
            (Some(100.0), Some(100.0), Some(100.0))
        );

        // two points per class, one correct each
        let mut m = ConfusionMatrix::new(t.all_classes());
        m.accumulate(
            &[Some(A), Some(B), Some(B), Some(A)],
            &[Some(A), Some(A), Some(B), Some(B)],
        )
        .unwrap();
        let r = report(&m, &t, &EvalOptions::default()).unwrap();
        let third = 100.0 / 3.0;
        assert!((r.miou_base.unwrap() - third).abs() < 1e-12);
        assert!((r.miou.unwrap() - third).abs() < 1e-12);
        assert_eq!(r.classes[0].iou, None);
        let zero = report(
            &m,
            &t,
            &EvalOptions {
                include_background: true,
                absent: AbsentPolicy::Zero,
            },
        )
        .unwrap();
        assert!((zero.miou.unwrap() - 2.0 * third / 3.0).abs() < 1e-12);
        assert!(r
            .to_csv()
            .starts_with("id,name,role,iou\n0,c0,background,\n"));
        assert!(r.summary_table("x").contains("33.3"));
    }

    #[test]
    fn merge_is_commutative() {
        let mut a = ConfusionMatrix::new(vec![U, A]);
        a.accumulate(&[Some(A)], &[Some(U)]).unwrap();
        let mut b = ConfusionMatrix::new(vec![U, A]);
        b.accumulate(&[Some(U), Some(A)], &[Some(U), Some(A)])
            .unwrap();
        let mut ab = a.clone();
        ab.merge(&b).unwrap();
        let mut ba = b.clone();
        ba.merge(&a).unwrap();
        assert_eq!(ab, ba);
        assert!(ab.merge(&ConfusionMatrix::new(vec![A, U])).is_err());
    }
}
