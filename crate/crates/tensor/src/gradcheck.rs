//! Central finite-difference gradient checking against the autograd engine.

use rand::Rng;

use crate::autograd::Var;
use crate::params::{ParamId, ParamStore, Session};

#[derive(Debug, Clone)]
pub struct GradSample {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradSample {
    /// `|a - n| / max(|a|, |n|, floor)`.
    pub fn rel_error(&self, floor: f64) -> f64 {
        let denom = self.analytic.abs().max(self.numeric.abs()).max(floor);
        (self.analytic - self.numeric).abs() / denom
    }
}

/// Picks `count` (parameter, element) pairs uniformly over all trainable
/// scalar entries.
pub fn sample_coordinates<R: Rng + ?Sized>(store: &ParamStore<f64>, count: usize, rng: &mut R) -> Vec<(ParamId, usize)> {
    let ids: Vec<ParamId> = store.ids().filter(|&id| store.is_trainable(id)).collect();
    let total: usize = ids.iter().map(|&id| store.get(id).numel()).sum();
    assert!(total > 0, "no trainable parameters to sample");
    (0..count)
        .map(|_| {
            let mut k = rng.gen_range(0..total);
            for &id in &ids {
                let n = store.get(id).numel();
                if k < n {
                    return (id, k);
                }
                k -= n;
            }
            unreachable!()
        })
        .collect()
}

/// Compares analytic gradients of `loss` against central differences with
/// step `h` at the given coordinates. `loss` must be deterministic.
pub fn check<F>(store: &ParamStore<f64>, loss: F, coords: &[(ParamId, usize)], h: f64) -> Vec<GradSample>
where
    F: Fn(&Session<'_, f64>) -> Var<f64>,
{
    let analytic = {
        let s = Session::train(store);
        let l = loss(&s);
        l.backward();
        s.grads()
    };
    let lookup = |id: ParamId, i: usize| -> f64 {
        analytic
            .iter()
            .find(|(pid, _)| *pid == id)
            .map(|(_, g)| g.data()[i])
            .unwrap_or(0.0)
    };
    let mut probe = store.clone();
    let eval = |st: &ParamStore<f64>| -> f64 {
        let s = Session::train(st);
        loss(&s).value().item()
    };
    coords
        .iter()
        .map(|&(id, i)| {
            let orig = store.get(id).data()[i];
            probe.value_mut(id).data_mut()[i] = orig + h;
            let up = eval(&probe);
            probe.value_mut(id).data_mut()[i] = orig - h;
            let down = eval(&probe);
            probe.value_mut(id).data_mut()[i] = orig;
            GradSample {
                param: store.name(id).to_string(),
                index: i,
                analytic: lookup(id, i),
                numeric: (up - down) / (2.0 * h),
            }
        })
        .collect()
}
