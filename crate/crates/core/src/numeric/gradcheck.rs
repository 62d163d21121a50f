//! Central-difference gradient checking in 64-bit precision.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numeric::{ParamId, ParamStore, Tape, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradcheckOptions {
    pub h: f64,
    pub tol: f64,
    /// Check at most this many coordinates per parameter (randomly chosen).
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            h: 1e-5,
            tol: 1e-4,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamReport {
    pub name: String,
    pub coords: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    pub params: Vec<ParamReport>,
    /// Frozen parameters that nevertheless received an analytic gradient.
    pub frozen_with_grad: Vec<String>,
    pub tol: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol && self.frozen_with_grad.is_empty()
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Anything owning one or more parameter stores, e.g. a model whose
/// backbone and head keep separate stores.
pub trait ParamSet {
    fn param_stores(&self) -> Vec<&ParamStore<f64>>;
    fn param_stores_mut(&mut self) -> Vec<&mut ParamStore<f64>>;
}

impl ParamSet for ParamStore<f64> {
    fn param_stores(&self) -> Vec<&ParamStore<f64>> {
        vec![self]
    }

    fn param_stores_mut(&mut self) -> Vec<&mut ParamStore<f64>> {
        vec![self]
    }
}

fn store_mut<M: ParamSet>(m: &mut M, k: usize) -> &mut ParamStore<f64> {
    m.param_stores_mut().swap_remove(k)
}

/// Compare the analytic gradient of `f` against `(f(θ+h) − f(θ−h)) / 2h`
/// for every coordinate of every non-frozen parameter in `set`.
pub fn gradcheck<M, F>(set: &mut M, mut f: F, opts: GradcheckOptions) -> Result<GradcheckReport>
where
    M: ParamSet,
    F: FnMut(&mut Tape<f64>, &M) -> Result<Var>,
{
    let mut tape = Tape::new().with_finite_checks(true);
    let loss = f(&mut tape, set)?;
    let grads = tape.backward(loss)?;

    let mut frozen_with_grad = Vec::new();
    let mut reports = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let ids: Vec<(usize, ParamId)> = set
        .param_stores()
        .iter()
        .enumerate()
        .flat_map(|(k, s)| s.ids().map(move |id| (k, id)))
        .collect();
    for (k, id) in ids {
        let (name, frozen, len) = {
            let p = set.param_stores()[k].get(id);
            (p.name.clone(), p.frozen, p.tensor.len())
        };
        if frozen {
            if grads.get(id).is_some() {
                frozen_with_grad.push(name);
            }
            continue;
        }
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if m < len => {
                let mut c = sample(&mut rng, len, m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..len).collect(),
        };
        let analytic = grads.get(id).cloned();
        let mut worst = 0.0f64;
        for &c in &coords {
            let a = analytic.as_ref().map_or(0.0, |g| g.data()[c]);
            let orig = set.param_stores()[k].get(id).tensor.data()[c];
            store_mut(set, k).get_mut(id).tensor.data_mut()[c] = orig + opts.h;
            let plus = eval(&mut f, set);
            store_mut(set, k).get_mut(id).tensor.data_mut()[c] = orig - opts.h;
            let minus = eval(&mut f, set);
            store_mut(set, k).get_mut(id).tensor.data_mut()[c] = orig;
            let (plus, minus) = (plus?, minus?);
            let numeric = (plus - minus) / (2.0 * opts.h);
            if !numeric.is_finite() {
                return Err(Error::numeric(format!("non-finite finite difference for {name}[{c}]")));
            }
            worst = worst.max(rel_err(a, numeric));
        }
        reports.push(ParamReport {
            name,
            coords: coords.len(),
            max_rel_err: worst,
        });
    }
    let max_rel_err = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    Ok(GradcheckReport {
        max_rel_err,
        params: reports,
        frozen_with_grad,
        tol: opts.tol,
    })
}

fn eval<M, F>(f: &mut F, set: &M) -> Result<f64>
where
    F: FnMut(&mut Tape<f64>, &M) -> Result<Var>,
{
    let mut tape = Tape::no_grad().with_finite_checks(false);
    let v = f(&mut tape, set)?;
    let out = tape.value(v).item();
    if !out.is_finite() {
        return Err(Error::numeric("non-finite loss during finite differencing"));
    }
    Ok(out)
}
