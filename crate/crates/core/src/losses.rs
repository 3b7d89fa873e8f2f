//! Segmentation losses with analytic gradients w.r.t. pre-softmax logits.
//!
//! Every loss takes probability maps (the softmax of the logits) and returns
//! the scalar value together with `∂loss/∂logits`, chained through the
//! softmax Jacobian. Rows are elements (valid range-image pixels), columns
//! are class heads in `class_order`.

use ndarray::{Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taxonomy::{ClassId, ClassWeights, Label, Taxonomy};

/// Lower clamp applied to probabilities before taking a logarithm.
pub const LN_CLAMP: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct LogitsMap {
    pub values: Array2<f64>,
    pub class_order: Vec<ClassId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap {
    pub values: Array2<f64>,
    pub class_order: Vec<ClassId>,
}

impl ProbMap {
    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn column(&self, c: ClassId) -> Option<usize> {
        self.class_order.iter().position(|&k| k == c)
    }

    fn require_column(&self, c: ClassId) -> Result<usize> {
        self.column(c).ok_or(Error::UnknownClass(c.0))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossResult {
    pub value: f64,
    /// `∂loss/∂logits`, same shape as the input map.
    pub grad: Array2<f64>,
    /// Named component values, for traces.
    pub terms: Vec<(&'static str, f64)>,
}

impl LossResult {
    fn single(name: &'static str, value: f64, grad: Array2<f64>) -> Self {
        LossResult {
            value,
            grad,
            terms: vec![(name, value)],
        }
    }

    fn accumulate(&mut self, other: LossResult) {
        self.value += other.value;
        self.grad += &other.grad;
        self.terms.extend(other.terms);
    }

    pub fn term(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|(n, _)| *n == name).map(|(_, v)| *v)
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax(logits: &LogitsMap) -> ProbMap {
    let mut values = logits.values.clone();
    for mut row in values.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    ProbMap {
        values,
        class_order: logits.class_order.clone(),
    }
}

/// Chains `∂loss/∂P` through the softmax: `g = P ⊙ (d − ⟨d, P⟩)` per row.
pub fn softmax_backward(probs: &Array2<f64>, dprobs: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(probs.raw_dim());
    for ((p, d), mut g) in probs
        .rows()
        .into_iter()
        .zip(dprobs.rows())
        .zip(out.rows_mut())
    {
        let dot = p.dot(&d);
        g.assign(&(&p * &(&d - dot)));
    }
    out
}

fn clamped_ln(p: f64) -> f64 {
    p.max(LN_CLAMP).ln()
}

/// Derivative of `clamped_ln`.
fn clamped_ln_grad(p: f64) -> f64 {
    if p > LN_CLAMP {
        1.0 / p
    } else {
        0.0
    }
}

fn check_rows(what: &str, rows: usize, expected: usize) -> Result<()> {
    if rows != expected {
        return Err(Error::ShapeMismatch {
            expected: format!("{expected} {what}"),
            got: format!("{rows}"),
        });
    }
    Ok(())
}

fn label_columns(probs: &ProbMap, labels: &[Label]) -> Result<Vec<Option<usize>>> {
    check_rows("labels", labels.len(), probs.rows())?;
    labels
        .iter()
        .map(|l| l.map(|c| probs.require_column(c)).transpose())
        .collect()
}

fn weight(weights: &ClassWeights, c: ClassId) -> Result<f64> {
    weights
        .get(c)
        .ok_or_else(|| Error::Config(format!("no class weight for class {c}")))
}

/// Inverse-frequency weighted cross-entropy averaged over non-ignored elements.
pub fn weighted_ce(
    probs: &ProbMap,
    labels: &[Label],
    weights: &ClassWeights,
) -> Result<LossResult> {
    let cols = label_columns(probs, labels)?;
    let n = cols.iter().flatten().count();
    let mut grad = Array2::zeros(probs.values.raw_dim());
    if n == 0 {
        return Ok(LossResult::single("ce", 0.0, grad));
    }
    let scale = 1.0 / n as f64;
    let mut value = 0.0;
    for (i, (col, label)) in cols.iter().zip(labels).enumerate() {
        let (Some(col), Some(class)) = (col, label) else {
            continue;
        };
        let alpha = weight(weights, *class)?;
        let p = probs.values[(i, *col)];
        value -= alpha * clamped_ln(p);
        if p > LN_CLAMP {
            let mut row = grad.row_mut(i);
            row.assign(&probs.values.row(i));
            row[*col] -= 1.0;
            row *= alpha * scale;
        }
    }
    Ok(LossResult::single("ce", value * scale, grad))
}

/// Lovász extension of the Jaccard loss for one class.
///
/// `errors[i]` is the continuous error of element `i` and `foreground[i]`
/// whether it belongs to the class. Returns the extension value and its
/// gradient with respect to `errors` (exact where no two errors tie).
/// Ties in sorting are broken by ascending element index.
pub fn lovasz_extension(errors: &[f64], foreground: &[bool]) -> (f64, Vec<f64>) {
    debug_assert_eq!(errors.len(), foreground.len());
    let m = errors.len();
    if m == 0 {
        return (0.0, Vec::new());
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| errors[b].total_cmp(&errors[a]).then(a.cmp(&b)));

    let gts = foreground.iter().filter(|&&f| f).count() as f64;
    let mut grad = vec![0.0; m];
    let mut value = 0.0;
    let (mut cum_fg, mut cum_bg) = (0.0, 0.0);
    let mut prev_jaccard = 0.0;
    for &i in &order {
        if foreground[i] {
            cum_fg += 1.0;
        } else {
            cum_bg += 1.0;
        }
        let intersection = gts - cum_fg;
        let union = gts + cum_bg;
        let jaccard = if union > 0.0 {
            1.0 - intersection / union
        } else {
            0.0
        };
        let g = jaccard - prev_jaccard;
        prev_jaccard = jaccard;
        grad[i] = g;
        value += errors[i] * g;
    }
    (value, grad)
}

/// Lovász-Softmax averaged over `class_set`, including classes absent from
/// the labels. Ignored elements are excluded.
pub fn lovasz_softmax(
    probs: &ProbMap,
    labels: &[Label],
    class_set: &[ClassId],
) -> Result<LossResult> {
    if class_set.is_empty() {
        return Err(Error::Empty("Lovász class set"));
    }
    check_rows("labels", labels.len(), probs.rows())?;
    let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].is_some()).collect();
    let mut dprobs = Array2::zeros(probs.values.raw_dim());
    let scale = 1.0 / class_set.len() as f64;
    let mut value = 0.0;
    for &k in class_set {
        let col = probs.require_column(k)?;
        let fg: Vec<bool> = rows.iter().map(|&i| labels[i] == Some(k)).collect();
        let errors: Vec<f64> = rows
            .iter()
            .zip(&fg)
            .map(|(&i, &f)| {
                let p = probs.values[(i, col)];
                if f {
                    1.0 - p
                } else {
                    p
                }
            })
            .collect();
        let (v, g) = lovasz_extension(&errors, &fg);
        value += v;
        for ((&i, &f), g) in rows.iter().zip(&fg).zip(g) {
            dprobs[(i, col)] += if f { -g } else { g } * scale;
        }
    }
    let grad = softmax_backward(&probs.values, &dprobs);
    Ok(LossResult::single("lovasz", value * scale, grad))
}

/// How the background probability of the unbiased cross-entropy is formed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackgroundSource {
    /// Sum of the frozen base model's base-class probabilities; background
    /// elements carry no gradient.
    #[default]
    Paper,
    /// Student's own `P^u + Σ_{C_b} P^k`.
    CurrentModel,
}

fn check_aligned(student: &ProbMap, other: &ProbMap) -> Result<()> {
    if student.rows() != other.rows() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} aligned rows", student.rows()),
            got: format!("{}", other.rows()),
        });
    }
    Ok(())
}

/// Cross-entropy over `{u} ∪ C_n` labels where the background probability
/// aggregates the base classes.
pub fn unbiased_ce(
    student: &ProbMap,
    base: &ProbMap,
    labels: &[Label],
    weights: &ClassWeights,
    tax: &Taxonomy,
    source: BackgroundSource,
) -> Result<LossResult> {
    check_aligned(student, base)?;
    let cols = label_columns(student, labels)?;
    let u = tax.background();
    let student_bg: Vec<usize> = std::iter::once(u)
        .chain(tax.base().iter().copied())
        .map(|c| student.require_column(c))
        .collect::<Result<_>>()?;
    let base_cols: Vec<usize> = match source {
        BackgroundSource::Paper => tax
            .base()
            .iter()
            .map(|&c| base.require_column(c))
            .collect::<Result<_>>()?,
        BackgroundSource::CurrentModel => Vec::new(),
    };

    let n = cols.iter().flatten().count();
    let mut dprobs = Array2::zeros(student.values.raw_dim());
    if n == 0 {
        return Ok(LossResult::single("ce", 0.0, dprobs));
    }
    let scale = 1.0 / n as f64;
    let mut value = 0.0;
    for (i, (col, label)) in cols.iter().zip(labels).enumerate() {
        let (Some(col), Some(class)) = (col, label) else {
            continue;
        };
        let alpha = weight(weights, *class)?;
        if *class == u {
            match source {
                BackgroundSource::Paper => {
                    let p: f64 = base_cols.iter().map(|&c| base.values[(i, c)]).sum();
                    value -= alpha * clamped_ln(p);
                }
                BackgroundSource::CurrentModel => {
                    let p: f64 = student_bg.iter().map(|&c| student.values[(i, c)]).sum();
                    value -= alpha * clamped_ln(p);
                    let d = -alpha * scale * clamped_ln_grad(p);
                    for &c in &student_bg {
                        dprobs[(i, c)] += d;
                    }
                }
            }
        } else if tax.is_novel(*class) {
            let p = student.values[(i, *col)];
            value -= alpha * clamped_ln(p);
            dprobs[(i, *col)] -= alpha * scale * clamped_ln_grad(p);
        } else {
            return Err(Error::UnknownClass(class.0));
        }
    }
    let grad = softmax_backward(&student.values, &dprobs);
    Ok(LossResult::single("ce", value * scale, grad))
}

/// Distillation from a teacher over `{u} ∪ C_b`. With `aggregate_novel`
/// the student's background is `Σ_{C_n} P^k`; otherwise its own `P^u`.
fn distillation(
    student: &ProbMap,
    teacher: &ProbMap,
    tax: &Taxonomy,
    aggregate_novel: bool,
) -> Result<LossResult> {
    check_aligned(student, teacher)?;
    let u = tax.background();
    let teacher_classes: Vec<ClassId> = tax.base_stage_classes();
    let t_cols: Vec<usize> = teacher_classes
        .iter()
        .map(|&c| teacher.require_column(c))
        .collect::<Result<_>>()?;
    // student columns standing for each teacher class
    let s_cols: Vec<Vec<usize>> = teacher_classes
        .iter()
        .map(|&c| {
            if c == u && aggregate_novel {
                tax.novel()
                    .iter()
                    .map(|&n| student.require_column(n))
                    .collect()
            } else {
                student.require_column(c).map(|col| vec![col])
            }
        })
        .collect::<Result<_>>()?;

    let m = student.rows();
    let mut dprobs = Array2::zeros(student.values.raw_dim());
    if m == 0 {
        return Ok(LossResult::single("kd", 0.0, dprobs));
    }
    let scale = 1.0 / m as f64;
    let mut value = 0.0;
    for i in 0..m {
        let srow: ArrayView1<f64> = student.values.row(i);
        for (&tc, sc) in t_cols.iter().zip(&s_cols) {
            let t = teacher.values[(i, tc)];
            if t == 0.0 {
                continue;
            }
            let p: f64 = sc.iter().map(|&c| srow[c]).sum();
            value -= t * clamped_ln(p);
            let d = -t * scale * clamped_ln_grad(p);
            for &c in sc {
                dprobs[(i, c)] += d;
            }
        }
    }
    let grad = softmax_backward(&student.values, &dprobs);
    Ok(LossResult::single("kd", value * scale, grad))
}

/// Background-aware distillation: the teacher's background is matched by
/// the student's total novel-class probability.
pub fn unbiased_kd(student: &ProbMap, teacher: &ProbMap, tax: &Taxonomy) -> Result<LossResult> {
    distillation(student, teacher, tax, true)
}

/// Plain distillation on the raw student columns of `{u} ∪ C_b`.
pub fn original_kd(student: &ProbMap, teacher: &ProbMap, tax: &Taxonomy) -> Result<LossResult> {
    distillation(student, teacher, tax, false)
}

/// Base-stage objective: weighted CE plus Lovász over the map's classes.
pub fn loss_base(probs: &ProbMap, labels: &[Label], weights: &ClassWeights) -> Result<LossResult> {
    let mut out = weighted_ce(probs, labels, weights)?;
    out.accumulate(lovasz_softmax(probs, labels, &probs.class_order)?);
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CeMode {
    Off,
    /// Cross-entropy against the student's own background column.
    Original,
    Unbiased,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KdMode {
    Off,
    Original,
    Unbiased,
}

/// Which terms make up the fine-tuning objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneLoss {
    pub ce: CeMode,
    #[serde(default)]
    pub ce_background: BackgroundSource,
    pub kd: KdMode,
    pub lovasz: bool,
}

impl Default for FinetuneLoss {
    fn default() -> Self {
        FinetuneLoss {
            ce: CeMode::Unbiased,
            ce_background: BackgroundSource::Paper,
            kd: KdMode::Unbiased,
            lovasz: true,
        }
    }
}

impl FinetuneLoss {
    /// Plain cross-entropy on remapped labels, nothing else.
    pub fn naive_ce() -> Self {
        FinetuneLoss {
            ce: CeMode::Original,
            ce_background: BackgroundSource::Paper,
            kd: KdMode::Off,
            lovasz: false,
        }
    }

    /// Distillation-based incremental learning baseline (original CE + original KD).
    pub fn lwf() -> Self {
        FinetuneLoss {
            ce: CeMode::Original,
            ce_background: BackgroundSource::Paper,
            kd: KdMode::Original,
            lovasz: false,
        }
    }

    pub fn any_enabled(&self) -> bool {
        self.ce != CeMode::Off || self.kd != KdMode::Off || self.lovasz
    }

    /// Every combination of the three axes (with the CE background source
    /// fixed to `source`), including the all-off one.
    pub fn all_combinations(source: BackgroundSource) -> Vec<FinetuneLoss> {
        let mut out = Vec::new();
        for ce in [CeMode::Off, CeMode::Original, CeMode::Unbiased] {
            for kd in [KdMode::Off, KdMode::Original, KdMode::Unbiased] {
                for lovasz in [false, true] {
                    out.push(FinetuneLoss {
                        ce,
                        ce_background: source,
                        kd,
                        lovasz,
                    });
                }
            }
        }
        out
    }
}

/// Fine-tuning objective: the sum of the enabled terms.
///
/// `student` covers all of `C`, `teacher` is the frozen base model's map
/// over `{u} ∪ C_b` on the same elements, and `labels` are over `{u} ∪ C_n`.
pub fn loss_finetune(
    student: &ProbMap,
    teacher: &ProbMap,
    labels: &[Label],
    weights: &ClassWeights,
    tax: &Taxonomy,
    flags: &FinetuneLoss,
) -> Result<LossResult> {
    if !flags.any_enabled() {
        return Err(Error::NoLossTerms);
    }
    let mut out = LossResult {
        value: 0.0,
        grad: Array2::zeros(student.values.raw_dim()),
        terms: Vec::new(),
    };
    match flags.ce {
        CeMode::Off => {}
        CeMode::Original => out.accumulate(weighted_ce(student, labels, weights)?),
        CeMode::Unbiased => out.accumulate(unbiased_ce(
            student,
            teacher,
            labels,
            weights,
            tax,
            flags.ce_background,
        )?),
    }
    if flags.lovasz {
        out.accumulate(lovasz_softmax(student, labels, &tax.novel_stage_classes())?);
    }
    match flags.kd {
        KdMode::Off => {}
        KdMode::Original => out.accumulate(original_kd(student, teacher, tax)?),
        KdMode::Unbiased => out.accumulate(unbiased_kd(student, teacher, tax)?),
    }
    Ok(out)
}

/// Sum of each row; used by property checks on gradients.
pub fn row_sums(grad: &Array2<f64>) -> Vec<f64> {
    grad.sum_axis(Axis(1)).to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::{ClassDef, Role};
    use ndarray::array;

    const U: ClassId = ClassId(0);
    const A: ClassId = ClassId(1);
    const N: ClassId = ClassId(2);

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

    fn probs(values: Array2<f64>, order: &[ClassId]) -> ProbMap {
        ProbMap {
            values,
            class_order: order.to_vec(),
        }
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&LogitsMap {
            values: array![[0.0, 0.0], [2f64.ln(), 0.0], [1000.0, 0.0]],
            class_order: vec![U, A],
        });
        assert_eq!(p.values.row(0).to_vec(), vec![0.5, 0.5]);
        assert!((p.values[(1, 0)] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p.values[(1, 1)] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(p.values.row(2).to_vec(), vec![1.0, 0.0]);
    }

    #[test]
    fn weighted_ce_examples() {
        let w = ClassWeights::uniform(&[U, A]);
        let perfect = weighted_ce(&probs(array![[0.0, 1.0]], &[U, A]), &[Some(A)], &w).unwrap();
        assert_eq!(perfect.value, 0.0);

        let half = probs(array![[0.5, 0.5]], &[U, A]);
        let r = weighted_ce(&half, &[Some(A)], &w).unwrap();
        assert!((r.value - 2f64.ln()).abs() < 1e-15);

        let w2 = ClassWeights::from_map([(U, 1.0), (A, 2.0)].into()).unwrap();
        let r2 = weighted_ce(&half, &[Some(A)], &w2).unwrap();
        assert!((r2.value - 2.0 * r.value).abs() < 1e-15);
        assert_eq!(r2.grad, &r.grad * 2.0);

        assert!(matches!(
            weighted_ce(&half, &[Some(N)], &w),
            Err(Error::UnknownClass(2))
        ));
        let ignored = weighted_ce(&half, &[None], &w).unwrap();
        assert_eq!(ignored.value, 0.0);
        assert!(ignored.grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn lovasz_examples() {
        let perfect = probs(array![[1.0, 0.0], [0.0, 1.0]], &[U, A]);
        let r = lovasz_softmax(&perfect, &[Some(U), Some(A)], &[U, A]).unwrap();
        assert_eq!(r.value, 0.0);

        // truth A on the first element only, P^A = (0, 1): wrong on both
        let wrong = probs(array![[1.0, 0.0], [0.0, 1.0]], &[U, A]);
        let r = lovasz_softmax(&wrong, &[Some(A), Some(U)], &[A]).unwrap();
        assert_eq!(r.value, 1.0);
        let (v, _) = lovasz_extension(&[1.0, 1.0], &[true, false]);
        assert_eq!(v, 1.0);

        assert!(lovasz_softmax(&perfect, &[Some(U), Some(A)], &[]).is_err());
    }

    #[test]
    fn unbiased_ce_examples() {
        let t = tax();
        let w = ClassWeights::from_map([(U, 1.0), (N, 3.0)].into()).unwrap();
        let student = probs(array![[0.2, 0.3, 0.5], [0.1, 0.4, 0.5]], &[U, A, N]);
        let base = probs(array![[0.0, 1.0], [0.5, 0.5]], &[U, A]);

        let r = unbiased_ce(
            &student,
            &base,
            &[Some(U), Some(N)],
            &w,
            &t,
            BackgroundSource::Paper,
        )
        .unwrap();
        // background row contributes -ln 1 = 0; novel row 3 ln 2; averaged over 2
        assert!((r.value - 3.0 * 2f64.ln() / 2.0).abs() < 1e-14);
        assert!(r.grad.row(0).iter().all(|&g| g == 0.0));

        assert!(unbiased_ce(
            &student,
            &probs(array![[0.5, 0.5]], &[U, A]),
            &[Some(U), Some(N)],
            &w,
            &t,
            BackgroundSource::Paper
        )
        .is_err());
    }

    #[test]
    fn unbiased_kd_gibbs_equality_case() {
        let t = tax();
        let teacher = probs(array![[0.5, 0.5]], &[U, A]);
        let student = probs(array![[0.0, 0.5, 0.5]], &[U, A, N]);
        let r = unbiased_kd(&student, &teacher, &t).unwrap();
        assert!((r.value - 2f64.ln()).abs() < 1e-15);

        let teacher = probs(array![[0.0, 1.0]], &[U, A]);
        let student = probs(array![[0.0, 1.0, 0.0]], &[U, A, N]);
        assert_eq!(unbiased_kd(&student, &teacher, &t).unwrap().value, 0.0);
    }

    #[test]
    fn finetune_requires_a_term() {
        let t = tax();
        let student = probs(array![[0.2, 0.3, 0.5]], &[U, A, N]);
        let teacher = probs(array![[0.5, 0.5]], &[U, A]);
        let w = ClassWeights::uniform(&[U, N]);
        let off = FinetuneLoss {
            ce: CeMode::Off,
            ce_background: BackgroundSource::Paper,
            kd: KdMode::Off,
            lovasz: false,
        };
        assert!(matches!(
            loss_finetune(&student, &teacher, &[Some(N)], &w, &t, &off),
            Err(Error::NoLossTerms)
        ));
        let full = loss_finetune(
            &student,
            &teacher,
            &[Some(N)],
            &w,
            &t,
            &FinetuneLoss::default(),
        )
        .unwrap();
        let parts = unbiased_ce(
            &student,
            &teacher,
            &[Some(N)],
            &w,
            &t,
            BackgroundSource::Paper,
        )
        .unwrap()
        .value
            + lovasz_softmax(&student, &[Some(N)], &[U, N]).unwrap().value
            + unbiased_kd(&student, &teacher, &t).unwrap().value;
        assert!((full.value - parts).abs() < 1e-15);
        assert_eq!(full.terms.len(), 3);
    }
}
