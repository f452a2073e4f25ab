//! Federated averaging over one group of clients.

use ndarray::ArrayView2;
use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autoencoder::{sgd_epoch, AeParams};
use crate::data::ClientId;
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FedConfig {
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub client_fraction: f64,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            rounds: 20,
            local_epochs: 1,
            batch_size: 32,
            lr: 0.01,
            client_fraction: 1.0,
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 || self.local_epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "rounds, local_epochs and batch_size must be at least 1".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if !(self.client_fraction > 0.0 && self.client_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "client_fraction {} outside (0, 1]",
                self.client_fraction
            )));
        }
        Ok(())
    }
}

/// `local_epochs` epochs of SGD from the global snapshot. Returns the
/// updated parameters and the sample count used as aggregation weight.
pub fn client_update(
    global: &AeParams,
    local_data: ArrayView2<'_, f64>,
    cfg: &FedConfig,
    seed: u64,
) -> Result<(AeParams, usize)> {
    if local_data.nrows() == 0 {
        return Err(Error::EmptyInput("client data"));
    }
    let mut params = global.clone();
    for epoch in 0..cfg.local_epochs {
        params = sgd_epoch(
            &params,
            local_data,
            cfg.lr,
            cfg.batch_size,
            seed::derive(seed, "epoch", &[epoch as u64]),
        )?;
    }
    Ok((params, local_data.nrows()))
}

/// Coordinatewise mean weighted by sample count, summed in list order.
/// Each coordinate is kept within the range spanned by the updates.
pub fn aggregate(updates: &[(AeParams, usize)]) -> Result<AeParams> {
    let (first, _) = updates.first().ok_or(Error::EmptyInput("update list"))?;
    if let Some((bad, _)) = updates.iter().find(|(p, _)| !p.same_shape(first)) {
        return Err(Error::InvalidParameter(format!(
            "update shape {:?} differs from {:?}",
            bad.layer_dims, first.layer_dims
        )));
    }
    let total: usize = updates.iter().map(|(_, n)| n).sum();
    if total == 0 {
        return Err(Error::InvalidParameter(
            "aggregation weights sum to zero".into(),
        ));
    }
    let flats: Vec<Vec<f64>> = updates.iter().map(|(p, _)| p.flatten()).collect();
    let weights: Vec<f64> = updates
        .iter()
        .map(|&(_, n)| n as f64 / total as f64)
        .collect();
    let mut out = vec![0.0; flats[0].len()];
    for (k, o) in out.iter_mut().enumerate() {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for (flat, &w) in flats.iter().zip(&weights) {
            let v = flat[k];
            *o += w * v;
            lo = lo.min(v);
            hi = hi.max(v);
        }
        *o = o.clamp(lo, hi);
    }
    AeParams::from_flat(&first.layer_dims, &out)
}

/// [`aggregate`] after sorting updates by client id.
pub fn aggregate_by_id(mut updates: Vec<(ClientId, AeParams, usize)>) -> Result<AeParams> {
    updates.sort_by_key(|(id, _, _)| *id);
    let plain: Vec<(AeParams, usize)> = updates.into_iter().map(|(_, p, n)| (p, n)).collect();
    aggregate(&plain)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    /// Mean over participants of their local loss after the local update.
    pub mean_client_loss: f64,
    /// Loss of the aggregated model over all members' data.
    pub global_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederationOutcome {
    pub model: AeParams,
    pub rounds: Vec<RoundMetrics>,
}

/// One group member: id and local training features.
pub type Member<'a> = (ClientId, ArrayView2<'a, f64>);

/// Loss over several clients' data, weighted by row count.
fn pooled_loss(params: &AeParams, members: &[Member<'_>]) -> Result<f64> {
    let total: usize = members.iter().map(|(_, x)| x.nrows()).sum();
    members.iter().try_fold(0.0, |acc, (_, x)| {
        Ok(acc + params.loss(*x)? * x.nrows() as f64 / total as f64)
    })
}

/// Runs FedAvg from a seeded initialization. Per-round, per-client seeds come
/// from `(seed, round, client id)`, so results do not depend on execution order.
pub fn run_federation(
    group: &[Member<'_>],
    hidden: &[usize],
    cfg: &FedConfig,
    seed: u64,
) -> Result<FederationOutcome> {
    cfg.validate()?;
    let (_, first) = group.first().ok_or(Error::EmptyInput("federation group"))?;
    let init = AeParams::init_with_hidden(first.ncols(), hidden, seed::derive(seed, "init", &[]))?;
    run_federation_from(group, init, cfg, seed)
}

pub fn run_federation_from(
    group: &[Member<'_>],
    init: AeParams,
    cfg: &FedConfig,
    seed: u64,
) -> Result<FederationOutcome> {
    cfg.validate()?;
    if group.is_empty() {
        return Err(Error::EmptyInput("federation group"));
    }
    let mut members = group.to_vec();
    members.sort_by_key(|(id, _)| *id);
    let n_select =
        ((cfg.client_fraction * members.len() as f64).ceil() as usize).clamp(1, members.len());

    let mut global = init;
    let mut rounds = Vec::with_capacity(cfg.rounds);
    for round in 0..cfg.rounds {
        let selected: Vec<&Member<'_>> = if n_select == members.len() {
            members.iter().collect()
        } else {
            let mut rng = seed::rng(seed::derive(seed, "select", &[round as u64]));
            let mut picks = index::sample(&mut rng, members.len(), n_select).into_vec();
            picks.sort_unstable();
            picks.into_iter().map(|k| &members[k]).collect()
        };
        let updates: Vec<(AeParams, usize, f64)> = selected
            .par_iter()
            .map(|(id, x)| {
                let s = seed::derive(seed, "client-round", &[round as u64, id.key()]);
                let (p, n) = client_update(&global, *x, cfg, s)?;
                let l = p.loss(*x)?;
                Ok((p, n, l))
            })
            .collect::<Result<_>>()?;
        let mean_client_loss =
            updates.iter().map(|(_, _, l)| l).sum::<f64>() / updates.len() as f64;
        let plain: Vec<(AeParams, usize)> = updates.into_iter().map(|(p, n, _)| (p, n)).collect();
        global = aggregate(&plain)?;
        rounds.push(RoundMetrics {
            round,
            mean_client_loss,
            global_loss: pooled_loss(&global, &members)?,
        });
    }
    Ok(FederationOutcome {
        model: global,
        rounds,
    })
}

/// Round log as CSV: `round,mean_client_loss,global_loss`.
pub fn rounds_csv(rounds: &[RoundMetrics]) -> String {
    let mut out = String::from("round,mean_client_loss,global_loss\n");
    for r in rounds {
        out.push_str(&format!(
            "{},{:.10e},{:.10e}\n",
            r.round, r.mean_client_loss, r.global_loss
        ));
    }
    out
}
