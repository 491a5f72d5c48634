//! Knowledge distillation from a frozen teacher.

use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_rows, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    /// Weight on the KL term; `1 − alpha` goes to the task loss.
    pub alpha: Real,
    pub temperature: Real,
    /// Teacher checkpoint. When absent the harness trains one first.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher: Option<std::path::PathBuf>,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            alpha: 0.5,
            temperature: 2.0,
            teacher: None,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!(
                "distill alpha {} outside [0, 1]",
                self.alpha
            )));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "distill temperature {} must be positive",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Handles to the pieces of a distillation loss.
#[derive(Clone, Copy, Debug)]
pub struct DistillTerms {
    /// `α·T²·KL + (1 − α)·CE`.
    pub total: Var,
    /// Unweighted `KL(teacher ‖ student)` at temperature `T`.
    pub kl: Var,
    /// Unweighted task cross-entropy.
    pub ce: Var,
}

/// Mixes forward KL against a constant teacher with the task loss. Both are
/// averaged over positions whose target is present.
pub fn distill_loss(
    tape: &mut Tape,
    student_logits: Var,
    teacher_logits: &Tensor,
    targets: &[Option<usize>],
    alpha: Real,
    temperature: Real,
    label_smoothing: Real,
) -> Result<DistillTerms> {
    if !(temperature > 0.0) {
        return Err(Error::invalid(
            "distill_loss",
            format!("temperature {temperature} must be positive"),
        ));
    }
    if teacher_logits.shape() != tape.shape(student_logits) {
        return Err(Error::ShapeMismatch {
            op: "distill_loss",
            left: tape.shape(student_logits).to_vec(),
            right: teacher_logits.shape().to_vec(),
        });
    }
    let v = teacher_logits.cols();
    let scaled: Vec<Real> = teacher_logits
        .data()
        .iter()
        .map(|x| x / temperature)
        .collect();
    let teacher_probs = Tensor::new(teacher_logits.shape().to_vec(), softmax_rows(&scaled, v))?;
    let rows: Vec<bool> = targets.iter().map(Option::is_some).collect();
    let s = tape.scale(student_logits, 1.0 / temperature);
    let log_q = tape.log_softmax(s);
    let kl = tape.kl_div(log_q, &teacher_probs, Some(&rows))?;
    let ce = tape.cross_entropy(student_logits, targets, label_smoothing)?;
    let a = tape.scale(kl, alpha * temperature * temperature);
    let b = tape.scale(ce, 1.0 - alpha);
    let total = tape.add(a, b)?;
    Ok(DistillTerms { total, kl, ce })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::log_sum_exp;

    fn logits(tape: &mut Tape, rows: usize, data: Vec<Real>) -> Var {
        let cols = data.len() / rows;
        tape.leaf(Tensor::new(vec![rows, cols], data).unwrap().with_grad())
    }

    #[test]
    fn identical_student_has_zero_kl() {
        let data = vec![0.3, -1.0, 2.2, 0.0, 0.5, 0.5];
        let mut tape = Tape::new();
        let s = logits(&mut tape, 2, data.clone());
        let teacher = Tensor::new(vec![2, 3], data).unwrap();
        let t = distill_loss(&mut tape, s, &teacher, &[Some(2), Some(0)], 0.5, 2.0, 0.0).unwrap();
        assert!(tape.value(t.kl).item().abs() <= 1e-12);
        let total = tape.value(t.total).item();
        assert!((total - 0.5 * tape.value(t.ce).item()).abs() <= 1e-12);
    }

    #[test]
    fn alpha_zero_is_task_loss() {
        let mut tape = Tape::new();
        let s = logits(&mut tape, 1, vec![1.0, 2.0, 0.0]);
        let teacher = Tensor::new(vec![1, 3], vec![-4.0, 0.0, 4.0]).unwrap();
        let t = distill_loss(&mut tape, s, &teacher, &[Some(1)], 0.0, 2.0, 0.0).unwrap();
        assert_eq!(tape.value(t.total).item(), tape.value(t.ce).item());
    }

    #[test]
    fn three_class_closed_form() {
        let (st, te) = ([0.5, -0.2, 1.1], [1.0, 0.3, -0.6]);
        let (alpha, temp) = (0.5, 2.0);
        let mut tape = Tape::new();
        let s = logits(&mut tape, 1, st.to_vec());
        let teacher = Tensor::new(vec![1, 3], te.to_vec()).unwrap();
        let t = distill_loss(&mut tape, s, &teacher, &[Some(2)], alpha, temp, 0.0).unwrap();
        let p: Vec<Real> = {
            let z: Vec<Real> = te.iter().map(|x| x / temp).collect();
            let l = log_sum_exp(&z);
            z.iter().map(|x| (x - l).exp()).collect()
        };
        let lq: Vec<Real> = {
            let z: Vec<Real> = st.iter().map(|x| x / temp).collect();
            let l = log_sum_exp(&z);
            z.iter().map(|x| x - l).collect()
        };
        let kl: Real = (0..3).map(|i| p[i] * (p[i].ln() - lq[i])).sum();
        let ce = log_sum_exp(&st) - st[2];
        let want = alpha * temp * temp * kl + (1.0 - alpha) * ce;
        assert!((tape.value(t.total).item() - want).abs() < 1e-14);
    }

    #[test]
    fn kl_is_non_negative_and_errors_are_reported() {
        let mut tape = Tape::new();
        let s = logits(&mut tape, 2, vec![0.1, 0.9, -0.3, 0.4]);
        let teacher = Tensor::new(vec![2, 2], vec![2.0, -1.0, 0.0, 0.0]).unwrap();
        let t = distill_loss(&mut tape, s, &teacher, &[Some(0), None], 0.7, 1.0, 0.0).unwrap();
        assert!(tape.value(t.kl).item() > 0.0);
        assert!(distill_loss(&mut tape, s, &teacher, &[Some(0), None], 0.7, 0.0, 0.0).is_err());
        let wrong = Tensor::zeros(&[2, 3]);
        assert!(distill_loss(&mut tape, s, &wrong, &[Some(0), None], 0.7, 1.0, 0.0).is_err());
    }

    #[test]
    fn temperature_squared_keeps_gradient_scale() {
        // student slightly off the teacher: gradient of the weighted KL term
        // shrinks like 1/T² without compensation
        let teacher = vec![0.4, -0.3, 1.2, 0.0];
        let student: Vec<Real> = teacher
            .iter()
            .enumerate()
            .map(|(i, x)| x + 1e-3 * (i as Real - 1.5))
            .collect();
        let mut norms = Vec::new();
        for temp in [1.0, 2.0, 4.0] {
            let mut tape = Tape::new();
            let s = logits(&mut tape, 1, student.clone());
            let t = distill_loss(
                &mut tape,
                s,
                &Tensor::new(vec![1, 4], teacher.clone()).unwrap(),
                &[Some(0)],
                1.0,
                temp,
                0.0,
            )
            .unwrap();
            tape.backward(t.total).unwrap();
            norms.push(
                tape.grad(s)
                    .unwrap()
                    .iter()
                    .map(|g| g * g)
                    .sum::<Real>()
                    .sqrt(),
            );
        }
        for n in &norms[1..] {
            let ratio = n / norms[0];
            assert!((0.8..1.25).contains(&ratio), "ratio {ratio}");
        }
    }
}
