//! Central finite-difference check of tape gradients in `f64`.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Result, SgcnError};

use super::tape::{Tape, Var};
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradcheckOptions {
    pub eps: f64,
    /// Probe at most this many coordinates per input (sampled), or all.
    pub max_probes_per_input: Option<usize>,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            eps: 1e-4,
            max_probes_per_input: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// (input, coordinate) of the worst probe.
    pub worst: Option<(usize, usize)>,
    pub probes: usize,
}

fn evaluate<F>(inputs: &[Tensor<f64>], f: &mut F) -> Result<f64>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(SgcnError::Gradcheck(format!("function returned {} values", v.len())));
    }
    if !v[0].is_finite() {
        return Err(SgcnError::Gradcheck("function is not finite at a probe point".into()));
    }
    Ok(v[0])
}

/// Largest `|analytic − numeric| / max(1, |numeric|)` over the probed
/// coordinates of every input with `requires_grad`.
pub fn gradcheck<F>(inputs: &[Tensor<f64>], opts: GradcheckOptions, mut f: F) -> Result<GradcheckReport>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = f(&mut tape, &vars)?;
    if !tape.value(out)[0].is_finite() {
        return Err(SgcnError::Gradcheck("function is not finite at the base point".into()));
    }
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = inputs
        .iter()
        .zip(&vars)
        .map(|(t, &v)| tape.grad(v).map_or_else(|| vec![0.0; t.len()], |g| g.to_vec()))
        .collect();
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst: None,
        probes: 0,
    };
    for i in 0..work.len() {
        if !work[i].requires_grad {
            continue;
        }
        let n = work[i].len();
        let coords: Vec<usize> = match opts.max_probes_per_input {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for j in coords {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + opts.eps;
            let plus = evaluate(&work, &mut f)?;
            work[i].data_mut()[j] = orig - opts.eps;
            let minus = evaluate(&work, &mut f)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let err = (analytic[i][j] - numeric).abs() / numeric.abs().max(1.0);
            report.probes += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((i, j));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tanh_sum_passes_and_sampling_limits_probes() {
        let x = Tensor::new(&[3], vec![0.3, -0.7, 1.1]).unwrap().with_grad();
        let ok = gradcheck(std::slice::from_ref(&x), GradcheckOptions::default(), |t, v| {
            let y = t.tanh(v[0]);
            Ok(t.sum(y))
        })
        .unwrap();
        assert!(ok.max_rel_error < 1e-8);
        assert_eq!(ok.probes, 3);

        let sampled = gradcheck(
            &[x],
            GradcheckOptions {
                max_probes_per_input: Some(2),
                ..GradcheckOptions::default()
            },
            |t, v| Ok(t.sum(v[0])),
        )
        .unwrap();
        assert_eq!(sampled.probes, 2);
    }

    #[test]
    fn non_finite_is_reported() {
        let x = Tensor::new(&[1], vec![1000.0]).unwrap().with_grad();
        let err = gradcheck(&[x], GradcheckOptions::default(), |t, v| {
            let y = t.exp(v[0]);
            Ok(t.sum(y))
        })
        .unwrap_err();
        assert!(matches!(err, SgcnError::Gradcheck(_)));
    }
}
