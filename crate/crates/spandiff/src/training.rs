//! Supervision plumbing and the optimization loop: pad gold aspects to the
//! N diffusion slots, corrupt, denoise, score with cross-entropy, update
//! with decoupled weight decay. Everything is seeded and resumable.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{BoundaryLoss, TrainConfig};
use crate::corpus::{AnnotatedExample, AspectAnnotation, Polarity, Vocabularies};
use crate::error::{Result, SpandiffError};
use crate::evaluation::{score, EvalMode};
use crate::inference;
use crate::nn::{clip_global_norm, AdamW, NodeId, ParamStore, Tape};
use crate::schedule::{
    build_schedule, forward_sample, gaussian_noise, make_ddim_plan, normalize_spans,
    NoiseSchedule,
};
use crate::syntanet::{DenoiseNodes, EncoderImpl, EncoderState, SlotPrediction, SyntaNet, WordVocab};

/// Per-slot supervision produced by [`expand_gold`].
#[derive(Debug, Clone, PartialEq)]
pub struct SlotTargets {
    /// 1-based inclusive spans, length N.
    pub spans: Vec<(usize, usize)>,
    pub polarities: Vec<Polarity>,
    /// Which gold annotation supervises each slot; `None` marks the
    /// aspect-free filler.
    pub slot_to_gold: Vec<Option<usize>>,
}

/// Pad the gold list to `n_slots`. The first `|gold|` slots take the gold
/// annotations in order; the rest sample gold uniformly with replacement.
/// Aspect-free sentences supervise every slot toward the full-sentence
/// span with neutral polarity, to be suppressed at decode time.
pub fn expand_gold(
    gold: &[AspectAnnotation],
    sentence_len: usize,
    n_slots: usize,
    rng: &mut impl Rng,
) -> SlotTargets {
    assert!(n_slots >= 1, "need at least one slot");
    let mut spans = Vec::with_capacity(n_slots);
    let mut polarities = Vec::with_capacity(n_slots);
    let mut slot_to_gold = Vec::with_capacity(n_slots);
    if gold.is_empty() {
        for _ in 0..n_slots {
            spans.push((1, sentence_len));
            polarities.push(Polarity::Neutral);
            slot_to_gold.push(None);
        }
    } else {
        for (i, g) in gold.iter().take(n_slots).enumerate() {
            spans.push((g.start, g.end));
            polarities.push(g.polarity);
            slot_to_gold.push(Some(i));
        }
        while spans.len() < n_slots {
            let pick = rng.gen_range(0..gold.len());
            let g = &gold[pick];
            spans.push((g.start, g.end));
            polarities.push(g.polarity);
            slot_to_gold.push(Some(pick));
        }
    }
    SlotTargets {
        spans,
        polarities,
        slot_to_gold,
    }
}

fn logsumexp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn softplus(x: f64) -> f64 {
    crate::nn::tape::softplus(x)
}

/// Total cross-entropy over all slots: start + end + polarity. Boundary
/// terms are categorical over positions or independent Bernoullis per
/// position, selected by `mode`; polarity is always categorical.
///
/// Per-slot terms are summed in sorted order, so permuting slots together
/// with their targets cannot perturb the total, bit for bit.
pub fn compute_loss(pred: &SlotPrediction, targets: &SlotTargets, mode: BoundaryLoss) -> f64 {
    assert_eq!(pred.slots(), targets.spans.len(), "slot count mismatch");
    let mut terms: Vec<f64> = Vec::with_capacity(pred.slots());
    for i in 0..pred.slots() {
        let (s, e) = targets.spans[i];
        let start_row = pred.start_logits.row(i);
        let end_row = pred.end_logits.row(i);
        let boundary = match mode {
            BoundaryLoss::Categorical => {
                (logsumexp(start_row) - start_row[s - 1])
                    + (logsumexp(end_row) - end_row[e - 1])
            }
            BoundaryLoss::Binary => {
                let bce = |row: &[f64], target: usize| -> f64 {
                    row.iter().map(|&l| softplus(l)).sum::<f64>() - row[target]
                };
                bce(start_row, s - 1) + bce(end_row, e - 1)
            }
        };
        let pol_row = pred.polarity_logits.row(i);
        let pol = logsumexp(pol_row) - pol_row[targets.polarities[i].index()];
        terms.push(boundary + pol);
    }
    terms.sort_by(f64::total_cmp);
    terms.iter().sum()
}

/// The same objective assembled on the tape for backpropagation.
pub fn loss_on_tape(
    tape: &mut Tape,
    nodes: &DenoiseNodes,
    targets: &SlotTargets,
    mode: BoundaryLoss,
) -> NodeId {
    let start_items: Vec<(usize, usize)> = targets
        .spans
        .iter()
        .enumerate()
        .map(|(i, &(s, _))| (i, s - 1))
        .collect();
    let end_items: Vec<(usize, usize)> = targets
        .spans
        .iter()
        .enumerate()
        .map(|(i, &(_, e))| (i, e - 1))
        .collect();
    let pol_items: Vec<(usize, usize)> = targets
        .polarities
        .iter()
        .enumerate()
        .map(|(i, p)| (i, p.index()))
        .collect();

    let boundary = match mode {
        BoundaryLoss::Categorical => {
            let mut categorical = |logits: NodeId, items: &[(usize, usize)]| -> NodeId {
                let logp = tape.log_softmax_rows(logits);
                let picked = tape.select_items(logp, items);
                let neg = tape.scalar_mul(picked, -1.0);
                tape.sum_all(neg)
            };
            let s = categorical(nodes.start_logits, &start_items);
            let e = categorical(nodes.end_logits, &end_items);
            tape.add(s, e)
        }
        BoundaryLoss::Binary => {
            let mut bce = |logits: NodeId, items: &[(usize, usize)]| -> NodeId {
                let sp = tape.softplus(logits);
                let total = tape.sum_all(sp);
                let picked = tape.select_items(logits, items);
                let picked_sum = tape.sum_all(picked);
                tape.sub(total, picked_sum)
            };
            let s = bce(nodes.start_logits, &start_items);
            let e = bce(nodes.end_logits, &end_items);
            tape.add(s, e)
        }
    };
    let logp = tape.log_softmax_rows(nodes.polarity_logits);
    let picked = tape.select_items(logp, &pol_items);
    let neg = tape.scalar_mul(picked, -1.0);
    let pol = tape.sum_all(neg);
    tape.add(boundary, pol)
}

#[derive(Debug, Clone, Copy)]
pub struct StepMetrics {
    pub loss: f64,
    pub grad_norm: f64,
}

/// One optimizer update over a batch: per example, pad gold to slots, draw
/// a uniform timestep, corrupt with fresh noise, denoise, and accumulate
/// the loss; then clip and apply the update.
pub fn train_step(
    model: &mut SyntaNet,
    batch: &[AnnotatedExample],
    sched: &NoiseSchedule,
    opt: &mut AdamW,
    rng: &mut ChaCha8Rng,
) -> Result<StepMetrics> {
    assert!(!batch.is_empty(), "empty batch");
    let config = model.config.clone();
    let mut tape = Tape::new();
    let mut example_losses = Vec::with_capacity(batch.len());
    let mut drawn_ts = Vec::with_capacity(batch.len());

    for example in batch {
        let targets = expand_gold(&example.gold, example.sentence_len(), model.slots, rng);
        let x0 = normalize_spans(&targets.spans, example.sentence_len(), config.lambda)?;
        let t = rng.gen_range(1..=sched.t_total());
        drawn_ts.push(t);
        let eps = gaussian_noise(model.slots, rng);
        let x_t = forward_sample(&x0, t, &eps, sched)?;
        let nodes = model.denoise_on_tape(&mut tape, &x_t, t, example)?;
        example_losses.push(loss_on_tape(
            &mut tape,
            &nodes,
            &targets,
            config.boundary_loss,
        ));
    }

    let stacked = tape.concat_rows(&example_losses);
    let total = tape.sum_all(stacked);
    let mean = tape.scalar_mul(total, 1.0 / batch.len() as f64);
    let loss = tape.value(mean).item();
    if !loss.is_finite() {
        return Err(SpandiffError::Training(format!(
            "non-finite loss {loss} (timesteps {drawn_ts:?}, first example {:?})",
            batch[0].tokens.join(" ")
        )));
    }

    let mut grads = tape.backward(mean).into_param_grads(&tape);
    let grad_norm = clip_global_norm(&mut grads, config.grad_clip);
    if !grad_norm.is_finite() {
        return Err(SpandiffError::Training(format!(
            "non-finite gradient norm (timesteps {drawn_ts:?})"
        )));
    }
    opt.step(&mut model.params, &grads);
    Ok(StepMetrics { loss, grad_norm })
}

/// One metrics-log line. `dev_f1` is present on epoch-boundary rows.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
    pub dev_f1: Option<f64>,
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Serialize, Deserialize)]
pub struct TrainState {
    pub version: u32,
    pub config: TrainConfig,
    pub vocabs: Vocabularies,
    pub encoder: EncoderState,
    pub slots: usize,
    pub params: ParamStore,
    pub optimizer: AdamW,
    pub rng: ChaCha8Rng,
    pub next_epoch: usize,
    pub step: u64,
    pub best_dev_f1: f64,
    pub best_params: ParamStore,
}

pub const TRAIN_STATE_VERSION: u32 = 1;

impl TrainState {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            SpandiffError::Training(format!("cannot read {}: {e}", path.display()))
        })?;
        let state: TrainState = serde_json::from_str(&text)
            .map_err(|e| SpandiffError::Training(format!("{}: {e}", path.display())))?;
        if state.version != TRAIN_STATE_VERSION {
            return Err(SpandiffError::Training(format!(
                "unsupported train state version {}",
                state.version
            )));
        }
        Ok(state)
    }
}

#[derive(Debug)]
pub struct FitOutcome {
    /// The dev-best model.
    pub model: SyntaNet,
    pub best_dev_f1: f64,
    pub metrics: Vec<MetricsRow>,
    pub final_state: TrainState,
}

/// Slot count: configured, or the maximum gold count in the training set.
pub fn resolve_slots(config: &TrainConfig, train: &[AnnotatedExample]) -> usize {
    config
        .slots
        .unwrap_or_else(|| train.iter().map(|e| e.gold.len()).max().unwrap_or(1).max(1))
}

/// Dev-set AESC micro-F1 with a per-epoch derived seed, so evaluation is
/// reproducible independently of training history.
fn evaluate_dev(
    model: &SyntaNet,
    dev: &[AnnotatedExample],
    sched: &NoiseSchedule,
    config: &TrainConfig,
    epoch: usize,
) -> Result<f64> {
    if dev.is_empty() {
        return Ok(0.0);
    }
    let plan = make_ddim_plan(config.t_total, config.gamma)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(epoch as u64 + 1));
    let mut preds = Vec::with_capacity(dev.len());
    let mut golds = Vec::with_capacity(dev.len());
    for ex in dev {
        preds.push(inference::sample(
            model,
            ex,
            sched,
            &plan,
            config.threshold,
            &mut rng,
        )?);
        golds.push(ex.gold.clone());
    }
    Ok(score(&preds, &golds, EvalMode::Aesc)?.f1())
}

/// Train for the configured number of epochs, evaluating on dev after each
/// and keeping the best parameters. `resume` continues a saved run;
/// `epochs = 0` evaluates the initial weights once and returns them.
pub fn fit(
    config: &TrainConfig,
    train: &[AnnotatedExample],
    dev: &[AnnotatedExample],
    vocabs: &Vocabularies,
    resume: Option<TrainState>,
) -> Result<FitOutcome> {
    if train.is_empty() {
        return Err(SpandiffError::Training("empty training set".into()));
    }
    config.validate()?;
    let sched = build_schedule(config.t_total, config.schedule()?)?;

    let (mut model, mut opt, mut rng, start_epoch, mut step, mut best_dev_f1, mut best_params) =
        match resume {
            Some(state) => {
                // Extending the epoch budget is the point of resuming;
                // everything else must match the state exactly.
                let comparable = TrainConfig {
                    epochs: config.epochs,
                    ..state.config.clone()
                };
                if comparable != *config {
                    return Err(SpandiffError::Training(
                        "resume state was produced under a different config".into(),
                    ));
                }
                let model = SyntaNet {
                    config: config.clone(),
                    vocabs: state.vocabs,
                    encoder: EncoderImpl::from_state(state.encoder)?,
                    params: state.params,
                    slots: state.slots,
                };
                (
                    model,
                    state.optimizer,
                    state.rng,
                    state.next_epoch,
                    state.step,
                    state.best_dev_f1,
                    state.best_params,
                )
            }
            None => {
                let slots = resolve_slots(config, train);
                let max_gold = train.iter().map(|e| e.gold.len()).max().unwrap_or(0);
                if slots < max_gold {
                    return Err(SpandiffError::Training(format!(
                        "N = {slots} is below the training maximum of {max_gold} aspects"
                    )));
                }
                let encoder = match &config.encoder {
                    crate::config::EncoderKind::Toy => EncoderImpl::Toy {
                        vocab: WordVocab::build(train),
                    },
                    crate::config::EncoderKind::Pretrained(path) => EncoderImpl::Precomputed {
                        table: crate::syntanet::PrecomputedTable::load(std::path::Path::new(
                            path,
                        ))?,
                        path: path.clone(),
                    },
                };
                let model = SyntaNet::init(config.clone(), vocabs.clone(), encoder, slots)?;
                let opt = AdamW::new(config.learning_rate, config.weight_decay);
                let rng = ChaCha8Rng::seed_from_u64(config.seed);
                let best = model.params.clone();
                (model, opt, rng, 0, 0u64, f64::NEG_INFINITY, best)
            }
        };

    let mut metrics = Vec::new();

    if config.epochs == 0 || start_epoch >= config.epochs {
        let f1 = evaluate_dev(&model, dev, &sched, config, start_epoch)?;
        if f1 > best_dev_f1 {
            best_dev_f1 = f1;
            best_params = model.params.clone();
        }
        metrics.push(MetricsRow {
            step,
            epoch: start_epoch,
            loss: f64::NAN,
            dev_f1: Some(f1),
        });
    }

    for epoch in start_epoch..config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<AnnotatedExample> =
                chunk.iter().map(|&i| train[i].clone()).collect();
            let m = train_step(&mut model, &batch, &sched, &mut opt, &mut rng)?;
            step += 1;
            metrics.push(MetricsRow {
                step,
                epoch,
                loss: m.loss,
                dev_f1: None,
            });
        }
        let f1 = evaluate_dev(&model, dev, &sched, config, epoch)?;
        if f1 > best_dev_f1 {
            best_dev_f1 = f1;
            best_params = model.params.clone();
        }
        metrics.push(MetricsRow {
            step,
            epoch,
            loss: metrics
                .iter()
                .rev()
                .find_map(|r| if r.dev_f1.is_none() { Some(r.loss) } else { None })
                .unwrap_or(f64::NAN),
            dev_f1: Some(f1),
        });
    }

    let final_state = TrainState {
        version: TRAIN_STATE_VERSION,
        config: config.clone(),
        vocabs: model.vocabs.clone(),
        encoder: model.encoder.state(),
        slots: model.slots,
        params: model.params.clone(),
        optimizer: opt,
        rng,
        next_epoch: config.epochs,
        step,
        best_dev_f1,
        best_params: best_params.clone(),
    };

    let best_model = SyntaNet {
        config: model.config.clone(),
        vocabs: model.vocabs.clone(),
        encoder: model.encoder.clone(),
        params: best_params,
        slots: model.slots,
    };

    Ok(FitOutcome {
        model: best_model,
        best_dev_f1: best_dev_f1.max(0.0),
        metrics,
        final_state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::EncoderKind;
    use crate::corpus::synthetic::synthetic_corpus;
    use crate::nn::Tensor;

    fn small_config() -> TrainConfig {
        TrainConfig {
            slots: Some(3),
            t_total: 50,
            gamma: 5,
            hidden_dim: 16,
            learning_rate: 3e-3,
            batch_size: 4,
            epochs: 1,
            encoder: EncoderKind::Toy,
            seed: 11,
            ..TrainConfig::default()
        }
    }

    fn gold(s: usize, e: usize, p: Polarity) -> AspectAnnotation {
        AspectAnnotation::new(s, e, p)
    }

    #[test]
    fn expand_identity_when_gold_fills_slots() {
        let golds = vec![
            gold(1, 2, Polarity::Positive),
            gold(4, 4, Polarity::Negative),
            gold(6, 7, Polarity::Neutral),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = expand_gold(&golds, 8, 3, &mut rng);
        assert_eq!(t.spans, vec![(1, 2), (4, 4), (6, 7)]);
        assert_eq!(t.slot_to_gold, vec![Some(0), Some(1), Some(2)]);
    }

    #[test]
    fn expand_single_gold_fills_every_slot() {
        let golds = vec![gold(2, 3, Polarity::Positive)];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = expand_gold(&golds, 5, 3, &mut rng);
        assert_eq!(t.spans, vec![(2, 3); 3]);
        assert_eq!(t.polarities, vec![Polarity::Positive; 3]);
    }

    #[test]
    fn expand_empty_gold_supervises_full_sentence_neutral() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = expand_gold(&[], 6, 4, &mut rng);
        assert_eq!(t.spans, vec![(1, 6); 4]);
        assert_eq!(t.polarities, vec![Polarity::Neutral; 4]);
        assert_eq!(t.slot_to_gold, vec![None; 4]);
    }

    #[test]
    fn expand_sampling_share_is_uniform() {
        // Monte-Carlo oracle on the padding sampler.
        let golds = vec![gold(1, 1, Polarity::Positive), gold(3, 3, Polarity::Negative)];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut counts = [0u64; 2];
        let draws = 10_000;
        for _ in 0..draws {
            let t = expand_gold(&golds, 4, 60, &mut rng);
            for slot in 2..60 {
                counts[t.slot_to_gold[slot].unwrap()] += 1;
            }
        }
        let total = (counts[0] + counts[1]) as f64;
        let share = counts[0] as f64 / total;
        assert!((share - 0.5).abs() < 0.02, "share {share}");
    }

    fn manual_pred(
        start_logits: Vec<Vec<f64>>,
        end_logits: Vec<Vec<f64>>,
        pol_logits: Vec<Vec<f64>>,
    ) -> SlotPrediction {
        SlotPrediction::from_logits(
            Tensor::from_rows(&start_logits),
            Tensor::from_rows(&end_logits),
            Tensor::from_rows(&pol_logits),
            BoundaryLoss::Categorical,
        )
    }

    #[test]
    fn near_point_mass_prediction_has_near_zero_loss() {
        let big = 200.0;
        let row = |hot: usize, n: usize| -> Vec<f64> {
            (0..n).map(|i| if i == hot { big } else { 0.0 }).collect()
        };
        let pred = manual_pred(
            vec![row(1, 4)],
            vec![row(2, 4)],
            vec![row(0, 3)],
        );
        let targets = SlotTargets {
            spans: vec![(2, 3)],
            polarities: vec![Polarity::Positive],
            slot_to_gold: vec![Some(0)],
        };
        let loss = compute_loss(&pred, &targets, BoundaryLoss::Categorical);
        assert!(loss >= 0.0);
        assert!(loss < 1e-12, "loss {loss}");
    }

    #[test]
    fn uniform_boundaries_cost_two_log_s() {
        let pred = manual_pred(
            vec![vec![0.0; 4]],
            vec![vec![0.0; 4]],
            vec![vec![200.0, 0.0, 0.0]],
        );
        let targets = SlotTargets {
            spans: vec![(1, 4)],
            polarities: vec![Polarity::Positive],
            slot_to_gold: vec![Some(0)],
        };
        let loss = compute_loss(&pred, &targets, BoundaryLoss::Categorical);
        assert!((loss - 2.0 * 4f64.ln()) < 1e-10, "loss {loss}");
        assert!((loss - 2.0 * 4f64.ln()).abs() < 1e-10);
    }

    #[test]
    fn loss_matches_bruteforce_cross_entropy() {
        // Independent oracle: explicit softmax + log, no shared code path.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..30 {
            let n = 5;
            let slots = 3;
            let rand_rows = |rng: &mut ChaCha8Rng, r: usize, c: usize| -> Vec<Vec<f64>> {
                (0..r)
                    .map(|_| (0..c).map(|_| rng.gen_range(-3.0..3.0)).collect())
                    .collect()
            };
            let sl = rand_rows(&mut rng, slots, n);
            let el = rand_rows(&mut rng, slots, n);
            let pl = rand_rows(&mut rng, slots, 3);
            let pred = manual_pred(sl.clone(), el.clone(), pl.clone());
            let targets = SlotTargets {
                spans: (0..slots)
                    .map(|_| {
                        let s = rng.gen_range(1..=n);
                        (s, rng.gen_range(s..=n))
                    })
                    .collect(),
                polarities: (0..slots)
                    .map(|_| Polarity::ALL[rng.gen_range(0..3)])
                    .collect(),
                slot_to_gold: vec![Some(0); slots],
            };

            let brute = {
                let ce = |row: &[f64], hot: usize| -> f64 {
                    let exps: Vec<f64> = row.iter().map(|v| v.exp()).collect();
                    let sum: f64 = exps.iter().sum();
                    -(exps[hot] / sum).ln()
                };
                let mut total = 0.0;
                for i in 0..slots {
                    total += ce(&sl[i], targets.spans[i].0 - 1);
                    total += ce(&el[i], targets.spans[i].1 - 1);
                    total += ce(&pl[i], targets.polarities[i].index());
                }
                total
            };
            let got = compute_loss(&pred, &targets, BoundaryLoss::Categorical);
            assert!((got - brute).abs() < 1e-6, "{got} vs {brute}");
        }
    }

    #[test]
    fn loss_is_permutation_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 6;
        let slots = 4;
        let rows = |rng: &mut ChaCha8Rng, r: usize, c: usize| -> Vec<Vec<f64>> {
            (0..r)
                .map(|_| (0..c).map(|_| rng.gen_range(-2.0..2.0)).collect())
                .collect()
        };
        let sl = rows(&mut rng, slots, n);
        let el = rows(&mut rng, slots, n);
        let pl = rows(&mut rng, slots, 3);
        let spans: Vec<(usize, usize)> = vec![(1, 2), (3, 3), (2, 5), (6, 6)];
        let pols = vec![
            Polarity::Positive,
            Polarity::Negative,
            Polarity::Neutral,
            Polarity::Positive,
        ];
        let perm = [2usize, 0, 3, 1];

        let base = compute_loss(
            &manual_pred(sl.clone(), el.clone(), pl.clone()),
            &SlotTargets {
                spans: spans.clone(),
                polarities: pols.clone(),
                slot_to_gold: vec![None; slots],
            },
            BoundaryLoss::Categorical,
        );
        let permuted = compute_loss(
            &manual_pred(
                perm.iter().map(|&i| sl[i].clone()).collect(),
                perm.iter().map(|&i| el[i].clone()).collect(),
                perm.iter().map(|&i| pl[i].clone()).collect(),
            ),
            &SlotTargets {
                spans: perm.iter().map(|&i| spans[i]).collect(),
                polarities: perm.iter().map(|&i| pols[i]).collect(),
                slot_to_gold: vec![None; slots],
            },
            BoundaryLoss::Categorical,
        );
        assert_eq!(base.to_bits(), permuted.to_bits(), "must match exactly");
    }

    #[test]
    fn binary_mode_agrees_with_direct_bernoulli_sum() {
        let sl = vec![vec![0.5, -1.0, 2.0]];
        let el = vec![vec![-0.3, 0.8, 0.1]];
        let pl = vec![vec![0.0, 0.0, 0.0]];
        let pred = SlotPrediction::from_logits(
            Tensor::from_rows(&sl),
            Tensor::from_rows(&el),
            Tensor::from_rows(&pl),
            BoundaryLoss::Binary,
        );
        let targets = SlotTargets {
            spans: vec![(3, 2)],
            polarities: vec![Polarity::Neutral],
            slot_to_gold: vec![Some(0)],
        };
        let direct = {
            let bce = |row: &[f64], hot: usize| -> f64 {
                row.iter()
                    .enumerate()
                    .map(|(i, &l)| {
                        let p = 1.0 / (1.0 + (-l).exp());
                        if i == hot {
                            -p.ln()
                        } else {
                            -(1.0 - p).ln()
                        }
                    })
                    .sum::<f64>()
            };
            bce(&sl[0], 2) + bce(&el[0], 1) + 3f64.ln()
        };
        let got = compute_loss(&pred, &targets, BoundaryLoss::Binary);
        assert!((got - direct).abs() < 1e-9, "{got} vs {direct}");
    }

    #[test]
    fn tape_loss_equals_plain_loss() {
        let (examples, vocabs, _) = synthetic_corpus(8, 8, 30);
        let config = small_config();
        let encoder = EncoderImpl::Toy {
            vocab: WordVocab::build(&examples),
        };
        let model = SyntaNet::init(config.clone(), vocabs, encoder, 3).unwrap();
        let sched = build_schedule(config.t_total, config.schedule().unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);

        for mode in [BoundaryLoss::Categorical, BoundaryLoss::Binary] {
            for ex in examples.iter().take(3) {
                let targets = expand_gold(&ex.gold, ex.sentence_len(), 3, &mut rng);
                let x0 = normalize_spans(&targets.spans, ex.sentence_len(), 1.0).unwrap();
                let eps = gaussian_noise(3, &mut rng);
                let x_t = forward_sample(&x0, 20, &eps, &sched).unwrap();

                let mut tape = Tape::new();
                let nodes = model.denoise_on_tape(&mut tape, &x_t, 20, ex).unwrap();
                let loss_node = loss_on_tape(&mut tape, &nodes, &targets, mode);
                let on_tape = tape.value(loss_node).item();

                let pred = SlotPrediction::from_logits(
                    tape.value(nodes.start_logits).clone(),
                    tape.value(nodes.end_logits).clone(),
                    tape.value(nodes.polarity_logits).clone(),
                    mode,
                );
                let plain = compute_loss(&pred, &targets, mode);
                assert!((on_tape - plain).abs() < 1e-9, "{mode:?}: {on_tape} vs {plain}");
            }
        }
    }

    fn tiny_fixture() -> (Vec<AnnotatedExample>, Vocabularies, SyntaNet, NoiseSchedule) {
        let (examples, vocabs, _) = synthetic_corpus(9, 8, 30);
        let config = small_config();
        let encoder = EncoderImpl::Toy {
            vocab: WordVocab::build(&examples),
        };
        let model = SyntaNet::init(config.clone(), vocabs.clone(), encoder, 3).unwrap();
        let sched = build_schedule(config.t_total, config.schedule().unwrap()).unwrap();
        (examples, vocabs, model, sched)
    }

    #[test]
    fn first_step_is_deterministic_and_finite() {
        let (examples, _, model, sched) = tiny_fixture();
        let batch = &examples[..4];

        let run = || -> (f64, f64) {
            let mut m = SyntaNet {
                config: model.config.clone(),
                vocabs: model.vocabs.clone(),
                encoder: model.encoder.clone(),
                params: model.params.clone(),
                slots: model.slots,
            };
            let mut opt = AdamW::new(m.config.learning_rate, m.config.weight_decay);
            let mut rng = ChaCha8Rng::seed_from_u64(100);
            let metrics = train_step(&mut m, batch, &sched, &mut opt, &mut rng).unwrap();
            (metrics.loss, metrics.grad_norm)
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert_eq!(g1.to_bits(), g2.to_bits());
        assert!(l1.is_finite() && g1.is_finite());
        assert!(g1 > 0.0);
    }

    #[test]
    fn loss_decreases_on_frozen_batch() {
        let (examples, _, mut model, sched) = tiny_fixture();
        let batch = &examples[..4];
        let mut opt = AdamW::new(model.config.learning_rate, model.config.weight_decay);
        let mut rng = ChaCha8Rng::seed_from_u64(200);
        let mut losses = Vec::new();
        for _ in 0..50 {
            let m = train_step(&mut model, batch, &sched, &mut opt, &mut rng).unwrap();
            losses.push(m.loss);
        }
        let first = losses[..5].iter().sum::<f64>() / 5.0;
        let last = losses[losses.len() - 5..].iter().sum::<f64>() / 5.0;
        assert!(
            last < first,
            "averaged loss should drop: first {first}, last {last}"
        );
    }

    #[test]
    fn fit_with_zero_epochs_returns_initial_weights() {
        let (examples, vocabs, _, _) = tiny_fixture();
        let config = TrainConfig {
            epochs: 0,
            ..small_config()
        };
        let out = fit(&config, &examples, &examples[..2], &vocabs, None).unwrap();
        // Initial weights: same params as a fresh init under the same seed.
        let encoder = EncoderImpl::Toy {
            vocab: WordVocab::build(&examples),
        };
        let fresh = SyntaNet::init(config.clone(), vocabs, encoder, 3).unwrap();
        assert_eq!(out.model.params, fresh.params);
        assert_eq!(out.metrics.len(), 1);
        assert!(out.metrics[0].dev_f1.is_some());
    }

    #[test]
    fn fit_rejects_empty_training_set() {
        let (_, vocabs, _, _) = tiny_fixture();
        let err = fit(&small_config(), &[], &[], &vocabs, None).unwrap_err();
        assert!(err.to_string().contains("empty training set"));
    }

    #[test]
    fn seeded_fits_produce_identical_loss_traces() {
        let (examples, vocabs, _, _) = tiny_fixture();
        let config = TrainConfig {
            epochs: 2,
            ..small_config()
        };
        let a = fit(&config, &examples, &examples[..2], &vocabs, None).unwrap();
        let b = fit(&config, &examples, &examples[..2], &vocabs, None).unwrap();
        let la: Vec<u64> = a.metrics.iter().map(|m| m.loss.to_bits()).collect();
        let lb: Vec<u64> = b.metrics.iter().map(|m| m.loss.to_bits()).collect();
        assert_eq!(la, lb);
    }

    #[test]
    fn resume_reproduces_straight_run_bit_for_bit() {
        let (examples, vocabs, _, _) = tiny_fixture();
        let dev = examples[..2].to_vec();

        let straight = fit(
            &TrainConfig {
                epochs: 2,
                ..small_config()
            },
            &examples,
            &dev,
            &vocabs,
            None,
        )
        .unwrap();

        // One epoch, save, then continue to two.
        let first = fit(
            &TrainConfig {
                epochs: 1,
                ..small_config()
            },
            &examples,
            &dev,
            &vocabs,
            None,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let state_path = dir.path().join("state.json");
        first.final_state.save(&state_path).unwrap();
        let resumed_state = TrainState::load(&state_path).unwrap();
        let resumed = fit(
            &TrainConfig {
                epochs: 2,
                ..small_config()
            },
            &examples,
            &dev,
            &vocabs,
            Some(resumed_state),
        )
        .unwrap();

        for (name, p) in straight.final_state.params.iter() {
            let q = resumed.final_state.params.get(name);
            assert_eq!(p, q, "parameter {name} diverged after resume");
        }
    }

    #[test]
    fn checkpoint_reload_reproduces_dev_f1_exactly() {
        let (examples, vocabs, _, _) = tiny_fixture();
        let config = TrainConfig {
            epochs: 1,
            ..small_config()
        };
        let dev = examples[..3].to_vec();
        let out = fit(&config, &examples, &dev, &vocabs, None).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        out.model.save(&path).unwrap();
        let reloaded = SyntaNet::load(&path).unwrap();

        let eval_with = |model: &SyntaNet| -> f64 {
            let sched = build_schedule(config.t_total, config.schedule().unwrap()).unwrap();
            let plan = make_ddim_plan(config.t_total, config.gamma).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(4242);
            let mut preds = Vec::new();
            let mut golds = Vec::new();
            for ex in &dev {
                preds.push(
                    crate::inference::sample(model, ex, &sched, &plan, 0.0, &mut rng).unwrap(),
                );
                golds.push(ex.gold.clone());
            }
            score(&preds, &golds, EvalMode::Aesc).unwrap().f1()
        };
        assert_eq!(eval_with(&out.model).to_bits(), eval_with(&reloaded).to_bits());
    }

    #[test]
    fn gold_count_above_slots_is_rejected() {
        let (examples, vocabs, _, _) = tiny_fixture();
        let config = TrainConfig {
            slots: Some(1),
            ..small_config()
        };
        // The synthetic corpus contains two-aspect sentences.
        let err = fit(&config, &examples, &[], &vocabs, None).unwrap_err();
        assert!(err.to_string().contains("below the training maximum"));
    }
}
