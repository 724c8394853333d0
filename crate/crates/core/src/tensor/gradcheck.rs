use super::{ParamStore, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct LeafError {
    pub name: String,
    pub max_rel_error: f64,
}

/// Per-leaf agreement between tape gradients and central differences.
#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub leaves: Vec<LeafError>,
    pub evaluations: usize,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.leaves
            .iter()
            .map(|l| l.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&LeafError> {
        self.leaves
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

fn evaluate<F>(f: &mut F, store: &ParamStore<f64>) -> Result<f64>
where
    F: FnMut(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    if tape.value(out).len() != 1 {
        return Err(Error::invalid(
            "gradcheck",
            format!("function output has shape {:?}, expected scalar", tape.shape(out)),
        ));
    }
    Ok(tape.item(out))
}

/// Compares analytic gradients of the scalar `f` against finite differences
/// for every learnable tensor in `store`. The numeric derivative is the
/// Richardson extrapolation `(4 D(eps/2) - D(eps)) / 3` of central
/// differences `D`, which cancels the `eps^2` truncation term. The relative
/// error of an entry is `|analytic - numeric| / max(1, |numeric|)`.
pub fn gradcheck<F>(store: &mut ParamStore<f64>, eps: f64, mut f: F) -> Result<GradcheckReport>
where
    F: FnMut(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    if tape.value(out).len() != 1 {
        return Err(Error::invalid(
            "gradcheck",
            format!("function output has shape {:?}, expected scalar", tape.shape(out)),
        ));
    }
    let grads = tape.backward(out)?;
    let ids: Vec<_> = store.ids().collect();
    let mut leaves = Vec::new();
    let mut evaluations = 1;
    for id in ids {
        if !store.get(id).requires_grad() {
            continue;
        }
        let n = store.get(id).numel();
        let analytic: Vec<f64> = match tape.param_var(id).and_then(|v| grads.get(v)) {
            Some(g) => g.to_vec(),
            None => vec![0.0; n],
        };
        let mut worst = 0.0f64;
        for i in 0..n {
            let orig = store.get(id).data()[i];
            let mut central = |h: f64| -> Result<f64> {
                store.get_mut(id).data_mut()[i] = orig + h;
                let plus = evaluate(&mut f, store)?;
                store.get_mut(id).data_mut()[i] = orig - h;
                let minus = evaluate(&mut f, store)?;
                store.get_mut(id).data_mut()[i] = orig;
                Ok((plus - minus) / (2.0 * h))
            };
            let numeric = (4.0 * central(0.5 * eps)? - central(eps)?) / 3.0;
            evaluations += 4;
            let rel = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(rel);
        }
        leaves.push(LeafError {
            name: store.name(id).to_string(),
            max_rel_error: worst,
        });
    }
    Ok(GradcheckReport {
        leaves,
        evaluations,
    })
}
