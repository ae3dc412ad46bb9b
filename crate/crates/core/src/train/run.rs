use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::Checkpoint;
use super::config::ExperimentConfig;
use super::eval::{check_manifests, evaluate_samples};
use super::loss::{labels_to_union, masked_seg_loss_on};
use super::metrics::{EpochSummary, MetricRow};
use super::model::{network_view, EvalMode, Model};
use super::optim::{learning_rate, AdamState, AdamW};
use crate::backbone::{forward, HeadMode};
use crate::error::{Error, Result};
use crate::gated::{cross_entropy_on, gate_logits_on, DomainRegistry};
use crate::synth::{augment, crop_patch, DatasetManifest, Sample, Split};
use crate::tape::GradTape;
use crate::tensor::Tensor;

/// Registry whose domains are the manifests ordered by `domain_id`, which
/// must run 0..n without gaps or repeats.
pub fn registry_from_manifests(manifests: &[DatasetManifest]) -> Result<DomainRegistry> {
    if manifests.is_empty() {
        return Err(Error::config("training needs at least one manifest"));
    }
    let mut sorted: Vec<&DatasetManifest> = manifests.iter().collect();
    sorted.sort_by_key(|m| m.domain_id);
    for (k, m) in sorted.iter().enumerate() {
        if m.domain_id != k {
            return Err(Error::config(format!(
                "domain ids must be 0..{} without repeats; manifest '{}' has id {}",
                manifests.len(),
                m.name,
                m.domain_id
            )));
        }
    }
    let pairs: Vec<(&str, Vec<&str>)> =
        sorted.iter().map(|m| (m.name.as_str(), m.labels.iter().map(String::as_str).collect())).collect();
    DomainRegistry::new(&pairs)
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Continue from this checkpoint instead of a fresh model.
    pub resume: Option<Checkpoint>,
    /// Return after this epoch (before the final prototype pass), as if the
    /// run had been interrupted there.
    pub stop_after: Option<usize>,
}

struct DomainData {
    id: usize,
    name: String,
    train: Vec<Sample>,
    val: Vec<Sample>,
    train_ids: Vec<usize>,
}

fn stack(samples: &[Sample]) -> Result<Tensor> {
    let first = samples[0].volume.shape().to_vec();
    let mut data = Vec::with_capacity(samples.len() * samples[0].volume.numel());
    for s in samples {
        if s.volume.shape() != first.as_slice() {
            return Err(Error::Data(format!("batch volumes differ in shape: {:?} vs {first:?}", s.volume.shape())));
        }
        data.extend_from_slice(s.volume.data());
    }
    let mut shape = vec![samples.len()];
    shape.extend(first);
    Tensor::new(&shape, data)
}

/// Round-robin batch plan for one epoch: each domain's training samples are
/// shuffled and chunked, then domains take turns.
fn epoch_plan(data: &[DomainData], batch: usize, cap: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<(usize, Vec<usize>)> {
    let per_domain: Vec<Vec<Vec<usize>>> = data
        .iter()
        .map(|d| {
            let mut idx: Vec<usize> = (0..d.train.len()).collect();
            idx.shuffle(rng);
            idx.chunks(batch).map(<[usize]>::to_vec).collect()
        })
        .collect();
    let longest = per_domain.iter().map(Vec::len).max().unwrap_or(0);
    let mut plan = Vec::new();
    for round in 0..longest {
        for (k, batches) in per_domain.iter().enumerate() {
            if let Some(b) = batches.get(round) {
                plan.push((k, b.clone()));
            }
        }
    }
    if let Some(c) = cap {
        plan.truncate(c);
    }
    plan
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

#[derive(Default, Clone, Copy)]
struct Acc {
    batches: usize,
    loss: f64,
    dice: f64,
    ce: f64,
    aux: f64,
}

/// Joint training over every manifest. Returns the final checkpoint (or the
/// one at `stop_after`).
pub fn train(
    config: &ExperimentConfig,
    manifests: &[DatasetManifest],
    registry: &DomainRegistry,
    opts: TrainOptions,
) -> Result<Checkpoint> {
    config.validate()?;
    check_manifests(registry, manifests)?;
    if manifests.len() != registry.n_domains() {
        return Err(Error::config(format!(
            "{} manifests for a registry of {} domains",
            manifests.len(),
            registry.n_domains()
        )));
    }
    let tc = &config.train;
    let mut data: Vec<DomainData> = manifests
        .iter()
        .map(|m| {
            let train = m.load_split(Split::Train)?;
            if train.is_empty() {
                return Err(Error::Data(format!("domain '{}' has no training samples", m.name)));
            }
            Ok(DomainData {
                id: m.domain_id,
                name: m.name.clone(),
                train,
                val: m.load_split(Split::Val)?,
                train_ids: m.splits.train.clone(),
            })
        })
        .collect::<Result<_>>()?;
    data.sort_by_key(|d| d.id);
    let patch = [tc.patch_extent; 3];
    for d in &data {
        for (s, id) in d.train.iter().zip(&d.train_ids) {
            if (0..3).any(|a| s.shape()[a] < tc.patch_extent) {
                return Err(Error::config(format!(
                    "sample {id} of '{}' ({:?}) is smaller than the {} patch",
                    d.name,
                    s.shape(),
                    tc.patch_extent
                )));
            }
        }
    }

    let mut ck = match opts.resume {
        Some(ck) => {
            if ck.model.config != *config {
                return Err(Error::config("resume checkpoint was trained with a different config"));
            }
            if ck.model.registry != *registry {
                return Err(Error::config("resume checkpoint registry does not match the manifests"));
            }
            ck
        }
        None => Checkpoint {
            model: Model::new(config.clone(), registry.clone())?,
            adam: AdamState::default(),
            epoch: 0,
            history: Vec::new(),
            epochs: Vec::new(),
        },
    };
    let opt = AdamW { weight_decay: tc.weight_decay, ..AdamW::default() };
    let gated = config.backbone.head_mode == HeadMode::GatedShared;

    for epoch in ck.epoch + 1..=tc.total_epochs {
        let lr = learning_rate(tc.lr_init, epoch, tc.warmup_epochs, tc.total_epochs, tc.schedule);
        let mut rng = epoch_rng(tc.seed, epoch);
        let plan = epoch_plan(&data, tc.batch_size, tc.batches_per_epoch, &mut rng);
        let mut acc = vec![Acc::default(); data.len()];
        for (b, (k, idx)) in plan.iter().enumerate() {
            let d = &data[*k];
            let mut batch = Vec::with_capacity(idx.len());
            for &i in idx {
                let s = if tc.augment { augment(&d.train[i], &mut rng)? } else { d.train[i].clone() };
                batch.push(crop_patch(&s, patch, tc.foreground_crop, &mut rng)?);
            }
            let ids: Vec<usize> = idx.iter().map(|&i| d.train_ids[i]).collect();
            let labels: Vec<&[u8]> = batch.iter().map(|s| s.labels.as_slice()).collect();
            let targets = labels_to_union(&labels, &ids, d.id, registry)
                .map_err(|e| Error::Data(format!("domain '{}': {e}", d.name)))?;

            let model = &mut ck.model;
            let mut tape = GradTape::new();
            let vars = model.params.register(&mut tape);
            let x = tape.constant(stack(&batch)?.cast(tc.dtype));
            let art = forward(&mut tape, &vars, &config.backbone, x, Some(d.id))?;
            let (seg, parts) = masked_seg_loss_on(&mut tape, art.union_logits, &targets, d.id, registry, &tc.loss)?;
            let mut root = seg;
            let mut aux_value = 0.0;
            if gated && tc.loss.domain_aux > 0.0 {
                let phi = if config.head.aux_end_to_end {
                    art.bottleneck_features
                } else {
                    tape.detach(art.bottleneck_features)
                };
                let gl = gate_logits_on(&mut tape, phi, vars.get("gate.weight")?, vars.get("gate.bias")?)?;
                let aux = cross_entropy_on(&mut tape, gl, &vec![d.id; idx.len()])?;
                aux_value = tape.value(aux).item();
                root = tape.add_scalars(&[(seg, 1.0), (aux, tc.loss.domain_aux)])?;
            }
            let total = tape.value(root).item();
            if !total.is_finite() {
                return Err(Error::Numerical(format!(
                    "loss is {total} at epoch {epoch}, batch {b} (domain '{}', samples {ids:?})",
                    d.name
                )));
            }
            let seg_value = tape.value(seg).item();
            let mut grads = tape.backward(root)?;
            let grads = vars.collect(&mut grads);
            opt.step(&mut model.params, &grads, &mut ck.adam, lr)
                .map_err(|e| Error::Numerical(format!("epoch {epoch}, batch {b}: {e}")))?;
            if let Some(bank) = model.bank.as_mut() {
                let phi = tape.value(art.bottleneck_features);
                let m = phi.dim(1);
                for i in 0..idx.len() {
                    bank.update(d.id, &phi.data()[i * m..(i + 1) * m])?;
                }
            }
            let a = &mut acc[*k];
            a.batches += 1;
            a.loss += seg_value;
            a.dice += parts.dice;
            a.ce += parts.cross_entropy;
            a.aux += aux_value;
        }

        let validate = epoch % tc.val_every == 0 || epoch == tc.total_epochs;
        let mode = if gated { EvalMode::DatasetFree } else { EvalMode::Oracle };
        let bank = if gated && validate { ck.model.routing_bank().ok() } else { None };
        for (k, d) in data.iter().enumerate() {
            let a = acc[k];
            let n = a.batches.max(1) as f64;
            let loss = (a.batches > 0).then(|| a.loss / n);
            ck.epochs.push(EpochSummary {
                epoch,
                domain: d.name.clone(),
                batches: a.batches,
                lr,
                loss: a.loss / n,
                dice_loss: a.dice / n,
                ce_loss: a.ce / n,
                aux_loss: a.aux / n,
            });
            let eval = if validate && !d.val.is_empty() && (!gated || bank.is_some()) {
                Some(evaluate_samples(&ck.model, d.id, &d.val, mode, bank.as_ref())?)
            } else {
                None
            };
            let classes = &registry.domain(d.id)?.labels;
            for (c, class) in classes.iter().chain([&"average".to_string()]).enumerate() {
                let dsc = eval.as_ref().map(|e| if c < classes.len() { e.class_dsc[c] } else { e.average });
                ck.history.push(MetricRow {
                    epoch,
                    domain: d.name.clone(),
                    class: class.clone(),
                    dsc,
                    loss,
                    domain_acc: eval.as_ref().and_then(|e| e.domain_acc),
                });
            }
        }
        ck.epoch = epoch;
        log::info!(
            "epoch {epoch}/{} lr {lr:.3e} loss {}",
            tc.total_epochs,
            acc.iter().map(|a| format!("{:.4}", a.loss / a.batches.max(1) as f64)).collect::<Vec<_>>().join(" ")
        );
        if opts.stop_after == Some(epoch) && epoch < tc.total_epochs {
            return Ok(ck);
        }
    }

    if ck.epoch == tc.total_epochs {
        finalize_prototypes(&mut ck.model, &data)?;
    }
    Ok(ck)
}

/// Closing pass over every training volume (no augmentation) that replaces
/// each prototype with the exact mean feature under the final weights.
fn finalize_prototypes(model: &mut Model, data: &[DomainData]) -> Result<()> {
    if model.bank.is_none() {
        return Ok(());
    }
    let div = model.config.backbone.divisor();
    let patch = model.config.train.patch_extent;
    let mut feats = Vec::with_capacity(data.len());
    for d in data {
        let f: Vec<Vec<f64>> = d
            .train
            .iter()
            .map(|s| Ok(model.logits_and_features(&network_view(s, div, patch).volume, None)?.1))
            .collect::<Result<_>>()?;
        feats.push((d.id, f));
    }
    let bank = model.bank.as_mut().expect("checked above");
    bank.begin_pass();
    for (id, f) in feats {
        for v in f {
            bank.update(id, &v)?;
        }
    }
    let degenerate = bank.finalize()?;
    if !degenerate.is_empty() {
        log::warn!("degenerate prototypes for domains {degenerate:?}");
    }
    Ok(())
}
