use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::inversion::{whitebox_attack, PassiveMap, TargetLevels, WhiteboxConfig};
use super::AttackError;
use crate::data::SplitData;
use crate::protocol::{Federation, Message, PassiveParty};
use crate::tensor::Tensor;

/// Surrogate training budget and the inversion run against it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QueryFreeConfig {
    pub surrogate_epochs: usize,
    pub surrogate_lr: f64,
    pub batch_size: usize,
    pub inversion: WhiteboxConfig,
}

impl Default for QueryFreeConfig {
    fn default() -> Self {
        QueryFreeConfig {
            surrogate_epochs: 10,
            surrogate_lr: 3e-3,
            batch_size: 32,
            inversion: WhiteboxConfig::default(),
        }
    }
}

/// What party `party` publishes for `samples`, as seen on the wire: noised
/// whenever ε is finite. Shaped `[B, N^A, levels·H]`.
pub fn published_targets(
    fed: &mut Federation,
    split: &SplitData,
    party: usize,
    samples: &[usize],
    levels: TargetLevels,
) -> Result<Tensor, AttackError> {
    let p = &mut fed.passives[party];
    let (_, outbox) = p.forward(&split.passive_batch(party, samples), true)?;
    let picked = levels.levels(fed.active.plan.levels.len());
    let (n, h) = (outbox[0].0.payload.shape()[0], outbox[0].0.payload.shape()[1]);
    let mut data = Vec::with_capacity(samples.len() * n * h * picked.len());
    for item in 0..samples.len() {
        let payloads: Vec<&Tensor> = picked
            .iter()
            .map(|&l| {
                &outbox
                    .iter()
                    .find(|(m, _)| m.level == l && m.item == item)
                    .expect("one message per level and item")
                    .0
                    .payload
            })
            .collect();
        for row in 0..n {
            for t in &payloads {
                data.extend_from_slice(t.row(row));
            }
        }
    }
    Ok(Tensor::new(vec![samples.len(), n, h * picked.len()], data)?)
}

fn train_surrogate(
    fed: &Federation,
    party: usize,
    shadow: &[&SplitData],
    cfg: &QueryFreeConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PassiveParty, AttackError> {
    let split = shadow
        .first()
        .ok_or_else(|| AttackError::Config("query-free attack needs shadow data".into()))?;
    let real = &fed.passives[party];
    let mut train = fed.setup.train;
    train.lr = cfg.surrogate_lr;
    let mut dp = real.dp;
    // the attacker simulates its own publications without noise
    dp.epsilon = None;
    let mut surrogate = PassiveParty::new(
        real.id,
        &fed.setup.model,
        &fed.setup.vna,
        dp,
        &train,
        &fed.active.plan,
        &split.active.coords,
        &split.passives[party].coords,
        split.passives[party].n_features,
        rng,
        crate::seed::stream(0, "surrogate"),
    )?;
    let mut others: Vec<PassiveParty> = fed.passives.clone();
    let mut pool: Vec<(usize, usize)> = shadow
        .iter()
        .enumerate()
        .flat_map(|(s, d)| (0..d.len()).map(move |i| (s, i)))
        .collect();
    let bs = cfg.batch_size.max(1);
    for epoch in 0..cfg.surrogate_epochs {
        pool.shuffle(rng);
        for (b, chunk) in pool.chunks(bs).enumerate() {
            // each shadow split is its own source, so group by split
            for (s, data) in shadow.iter().enumerate() {
                let samples: Vec<usize> = chunk.iter().filter(|(k, _)| *k == s).map(|&(_, i)| i).collect();
                if samples.is_empty() {
                    continue;
                }
                let mut inbox: Vec<Vec<Message>> = Vec::with_capacity(others.len());
                let mut session = None;
                for (q, other) in others.iter_mut().enumerate() {
                    let batch = data.passive_batch(q, &samples);
                    let msgs = if q == party {
                        let (sess, out) = surrogate.forward(&batch, false)?;
                        session = Some(sess);
                        out
                    } else {
                        other.forward(&batch, true)?.1
                    };
                    inbox.push(msgs.into_iter().map(|(m, _)| m).collect());
                }
                let mut active = fed.active.forward(&data.active_batch(&samples), &inbox)?;
                let (loss, _, outbox) = fed.active.backward(&mut active, &data.labels(&samples))?;
                if !loss.is_finite() {
                    return Err(AttackError::SurrogateDivergence { epoch, batch: b, loss });
                }
                let back: Vec<Message> = outbox
                    .into_iter()
                    .nth(party)
                    .expect("one outbox per party")
                    .into_iter()
                    .map(|(m, _)| m)
                    .collect();
                let grads = surrogate.backward(session.as_ref().expect("surrogate ran"), &back)?;
                surrogate.apply(&grads);
            }
        }
    }
    Ok(surrogate)
}

/// Trains a surrogate for passive party `party` through the frozen active
/// model on `shadow` data, then inverts `targets` through the surrogate.
///
/// Only the surrogate's parameters change; `fed` is left untouched.
pub fn queryfree_attack(
    fed: &Federation,
    party: usize,
    shadow: &[&SplitData],
    targets: &Tensor,
    levels: TargetLevels,
    cfg: &QueryFreeConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Tensor>, AttackError> {
    if party >= fed.passives.len() {
        return Err(AttackError::Config(format!("no passive party {party}")));
    }
    let surrogate = train_surrogate(fed, party, shadow, cfg, rng)?;
    let map = PassiveMap {
        party: &surrogate,
        steps: shadow[0].passive_history[party],
        targets: levels,
    };
    let mut restart = ChaCha8Rng::from_rng(rng);
    whitebox_attack(&map, targets, &cfg.inversion, &mut restart)
}
