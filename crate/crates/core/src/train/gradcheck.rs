//! Backward-pass gradients of a whole model checked against central
//! differences of the loss, per parameter group.

use rand::seq::index::sample;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::error::Result;
use crate::init;
use crate::peft::model::Model;
use crate::peft::registry::{Group, ParamId};
use crate::tape::{finite_diff_grad, relative_error, FiniteDiffOptions, Tape};
use crate::train::{batch_tensor, loss_and_grads, SyntheticDataset};

#[derive(Debug, Clone, Copy)]
pub struct GradcheckOptions {
    /// Coordinates sampled per group; `None` checks every coordinate.
    pub max_coords_per_group: Option<usize>,
    pub eps: f64,
    /// Std of the noise added to every trainable parameter first, so that
    /// zero-initialised factors do not hide the gradients behind them.
    pub perturb_std: f64,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            max_coords_per_group: Some(500),
            eps: 1e-4,
            perturb_std: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GroupCheck {
    pub group: String,
    pub n_scalars: usize,
    pub n_coords: usize,
    pub max_rel_err: f64,
    pub worst_param: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub method: String,
    pub groups: Vec<GroupCheck>,
    pub max_rel_err: f64,
}

fn group_label(g: Group) -> &'static str {
    match g {
        Group::Frozen => "phi_F",
        Group::Adapter => "phi_A",
        Group::Outside => "phi_O",
    }
}

/// Checks every trainable group of `model` on images `idx` of `data`.
pub fn gradcheck(
    model: &Model<f64>,
    data: &SyntheticDataset,
    idx: &[usize],
    opts: GradcheckOptions,
) -> Result<GradcheckReport> {
    let mut work = model.clone();
    let mut rng = init::rng_stream(opts.seed, 7);
    let noise = Normal::new(0.0, opts.perturb_std.max(0.0)).unwrap();
    let trainable: Vec<ParamId> = work.trainable_ids();
    for &id in &trainable {
        for v in work.store.value_mut(id).iter_mut() {
            *v += noise.sample(&mut rng);
        }
    }
    let (_, grads, _) = loss_and_grads(&work, data, idx)?;
    let mut params: Vec<Vec<f64>> = trainable.iter().map(|&id| work.store.value(id).to_vec()).collect();

    let mut groups = Vec::new();
    for g in [Group::Adapter, Group::Outside] {
        let members: Vec<usize> = (0..trainable.len())
            .filter(|&t| work.store.registry.get(trainable[t]).group() == g)
            .collect();
        let all: Vec<(usize, usize)> = members
            .iter()
            .flat_map(|&t| (0..params[t].len()).map(move |i| (t, i)))
            .collect();
        if all.is_empty() {
            continue;
        }
        let coords: Vec<(usize, usize)> = match opts.max_coords_per_group {
            Some(k) if k < all.len() => {
                let mut pick = sample(&mut rng, all.len(), k).into_vec();
                pick.sort_unstable();
                pick.into_iter().map(|j| all[j]).collect()
            }
            _ => all.clone(),
        };
        let fd = {
            let work = &mut work;
            let trainable = &trainable;
            let f = |p: &[Vec<f64>]| -> Result<f64> {
                for (t, &id) in trainable.iter().enumerate() {
                    work.store.value_mut(id).copy_from_slice(&p[t]);
                }
                let mut tape = Tape::new();
                let (x, labels) = batch_tensor(&mut tape, data, idx)?;
                let (loss, _) = work.loss(&mut tape, &x, &labels)?;
                Ok(tape.value(&loss)[0])
            };
            finite_diff_grad(
                f,
                &mut params,
                &coords,
                FiniteDiffOptions {
                    eps: opts.eps,
                    check_determinism: true,
                },
            )?
        };
        let (mut worst, mut worst_param) = (0.0f64, String::new());
        for (&(t, i), &num) in coords.iter().zip(&fd) {
            let id = trainable[t];
            let ana = grads.get(&id).map_or(0.0, |v| v[i]);
            let err = relative_error(ana, num);
            if err > worst || worst_param.is_empty() {
                worst = worst.max(err);
                worst_param = work.store.registry.get(id).name.clone();
            }
        }
        groups.push(GroupCheck {
            group: group_label(g).to_string(),
            n_scalars: all.len(),
            n_coords: coords.len(),
            max_rel_err: worst,
            worst_param,
        });
    }
    let max_rel_err = groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max);
    Ok(GradcheckReport {
        method: model.method.label(),
        groups,
        max_rel_err,
    })
}
