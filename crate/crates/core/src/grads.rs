//! Per-item tapes evaluated in parallel, with gradients summed in item order
//! so results do not depend on thread scheduling.

use std::collections::BTreeMap;

use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use rlfb_numerics::{AdamW, ParamStore, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Tape handles for a fixed set of named parameters.
pub struct Leaves<'t> {
    vars: BTreeMap<&'static str, Var<'t>>,
}

impl<'t> Leaves<'t> {
    pub fn new(params: &ParamStore, names: &[&'static str], tape: &'t Tape, trainable: bool) -> Self {
        let vars = names
            .iter()
            .map(|&n| {
                let v = params.shared(n);
                (n, if trainable { tape.param(v) } else { tape.constant_shared(v) })
            })
            .collect();
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Var<'t> {
        self.vars[name]
    }
}

pub type GradMap = BTreeMap<&'static str, Tensor>;

/// Runs `loss_fn` once per item on a fresh tape. Returns each loss and the
/// summed gradients.
pub fn parallel_grads<T, F>(
    params: &ParamStore,
    names: &[&'static str],
    items: &[T],
    loss_fn: F,
) -> Result<(Vec<f64>, GradMap)>
where
    T: Sync,
    F: for<'t> Fn(&Leaves<'t>, &T) -> Result<Var<'t>> + Sync,
{
    let per_item: Vec<Result<(f64, Vec<Option<Tensor>>)>> = items
        .par_iter()
        .map(|item| {
            let tape = Tape::new();
            let lv = Leaves::new(params, names, &tape, true);
            let loss = loss_fn(&lv, item)?;
            let g = tape.backward(loss)?;
            let grads = names.iter().map(|n| g.wrt(lv.get(n)).cloned()).collect();
            Ok((loss.item(), grads))
        })
        .collect();
    let mut losses = Vec::with_capacity(items.len());
    let mut total: GradMap = names
        .iter()
        .map(|&n| (n, Tensor::zeros(params.get(n).shape())))
        .collect();
    for r in per_item {
        let (loss, grads) = r?;
        losses.push(loss);
        for (n, g) in names.iter().zip(grads) {
            if let Some(g) = g {
                total.get_mut(n).unwrap().add_assign(&g);
            }
        }
    }
    Ok((losses, total))
}

/// Loads `scale * grads` into the gradient buffers and takes one step.
pub fn apply_grads(params: &mut ParamStore, grads: &GradMap, scale: f64, opt: &mut AdamW) -> Result<()> {
    params.zero_grad();
    for (n, g) in grads {
        let scaled = Tensor::new(g.shape().to_vec(), g.data().iter().map(|v| v * scale).collect())
            .expect("same shape");
        params.accumulate_grad(n, &scaled)?;
    }
    opt.step(params);
    if !params.all_finite() {
        return Err(Error::Training("parameters became non-finite".into()));
    }
    Ok(())
}

/// `scale * N(0, 1)` entries.
pub(crate) fn gaussian(rng: &mut Rng, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("positive shape")
}
