//! Training and inference drivers: resolution-grouped slice batches, scale
//! augmentation, the composite loss, AdamW under cosine warm restarts,
//! per-epoch validation, and slice-wise inference with three-view
//! aggregation and laterality restore.
//!
//! Training is deliberately single-threaded: given a seed, every shuffle,
//! augmentation draw, and floating-point reduction happens in a fixed order,
//! so a rerun with the same config is bit-identical.

use std::path::Path;

use ndarray::{Array2, Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::augment::{exsa_apply, insa_sample, AugmentConfig, AugmentError};
use crate::autograd::{BnMode, Graph, GraphError};
use crate::data::{
    load_intensity, load_labels, plane_dataset, Checkpoint, DataError, IntensityVolume,
    LabelTable, LabelVolume, Manifest, Split, VOLUME_VOXEL_MM,
};
use crate::eval::{
    restore_laterality_full, view_aggregate, AggregateWeights, EvalError, RestoreReport,
};
use crate::loss::{composite_loss, mask_radius, slice_weight_map, LossError};
use crate::model::{Model, ModelError, NetworkSpec, Plane};
use crate::opt::{Adam, OptConfig, OptError, WarmRestartSchedule};
use crate::tensor::FeatureMap;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("split {0} has no usable slices")]
    EmptySplit(Split),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Opt(#[from] OptError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Knobs of one training run. Defaults are the desk-scale values; the
/// paper-scale run uses batch 16 and 70 epochs instead.
#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    /// Amplitude of the two morphology weight-map terms (0 disables them).
    pub w_hires: f64,
    pub augment: AugmentConfig,
    pub opt: OptConfig,
    /// Warm-restart schedule: first cycle length, cycle growth, and floor.
    pub restart_t0: usize,
    pub restart_mult: usize,
    pub lr_min: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            epochs: 20,
            batch: 4,
            seed: 0,
            w_hires: 1.0,
            augment: AugmentConfig::default(),
            opt: OptConfig::default(),
            restart_t0: 10,
            restart_mult: 2,
            lr_min: 0.0,
        }
    }
}

/// One epoch of the metrics log.
#[derive(Debug, Clone)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Mean composite loss over the epoch's steps.
    pub mean_loss: f64,
    /// Every step's composite loss, in order.
    pub step_losses: Vec<f64>,
    /// Mean DSC (×100, foreground classes) over the validation split.
    pub val_dsc: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct DivergenceInfo {
    pub epoch: usize,
    pub step: usize,
}

/// Result of a training run. On divergence the checkpoint holds the last
/// parameters that produced finite losses (end of the previous epoch).
#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
    pub diverged: Option<DivergenceInfo>,
}

/// One 2-D training sample together with its source voxel size.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub image: Array2<f64>,
    pub labels: Array2<u16>,
    pub voxel_mm: f64,
}

/// Class count a plane model must be built with: the sagittal view trains
/// on merged labels, the other two on the full table.
pub fn classes_for_plane(table: &LabelTable, plane: Plane) -> usize {
    match plane {
        Plane::Sagittal => table.num_merged_classes(),
        _ => table.num_classes(),
    }
}

/// Load every slice of one split for one plane, flattened over volumes.
pub fn load_slice_bank(
    root: &Path,
    manifest: &Manifest,
    split: Split,
    table: &LabelTable,
    plane: Plane,
) -> Result<Vec<TrainItem>, TrainError> {
    let mut items = Vec::new();
    for entry in manifest.of_split(split) {
        let image = load_intensity(&entry.image_path(root))?;
        let labels = load_labels(&entry.label_path(root))?;
        let set = plane_dataset(&image, &labels, table, plane)?;
        for s in set.slices {
            items.push(TrainItem {
                image: s.image,
                labels: s.labels,
                voxel_mm: set.voxel_mm,
            });
        }
    }
    Ok(items)
}

/// Label-id sets (sorted) for the gray-matter and brain masks in the label
/// space a plane trains on (merged for sagittal).
fn plane_mask_ids(table: &LabelTable, plane: Plane) -> (Vec<u16>, Vec<u16>) {
    let to_space = |ids: Vec<u16>| -> Vec<u16> {
        let mut out: Vec<u16> = ids
            .into_iter()
            .map(|id| match plane {
                Plane::Sagittal => table.entries()[id as usize].merged_id,
                _ => id,
            })
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    };
    (to_space(table.gm_ids()), to_space(table.brain_ids()))
}

/// Group item indices by voxel size (batches never mix spatial dims) and cut
/// each group into batches. With an rng, items shuffle within groups and the
/// batch order shuffles globally; without an rng the order is kept as-is.
fn resolution_batches(
    items: &[TrainItem],
    batch: usize,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Vec<Vec<usize>> {
    use std::collections::BTreeMap;
    let mut groups: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, item) in items.iter().enumerate() {
        groups.entry(item.voxel_mm.to_bits()).or_default().push(i);
    }
    let mut batches = Vec::new();
    for idx in groups.values_mut() {
        if let Some(rng) = rng.as_deref_mut() {
            idx.shuffle(rng);
        }
        for chunk in idx.chunks(batch) {
            batches.push(chunk.to_vec());
        }
    }
    if let Some(rng) = rng {
        batches.shuffle(rng);
    }
    batches
}

/// A batch ready for the graph: input, one-hot target, per-pixel weights.
struct BatchTensors {
    x: FeatureMap<f32>,
    y: FeatureMap<f32>,
    omega: FeatureMap<f32>,
}

/// Assemble (possibly augmented) slices into padded batch tensors. Slices
/// whose dims differ (per-slice external scaling) are zero-padded to the
/// batch maximum; padded pixels get zero loss weight and an all-zero one-hot
/// row, so only the dice denominator sees them.
fn assemble_batch(
    slices: &[(Array2<f64>, Array2<u16>, f64)],
    classes: usize,
    gm_ids: &[u16],
    brain_ids: &[u16],
    w_hires: f64,
) -> Result<BatchTensors, TrainError> {
    let n = slices.len();
    let ht = slices.iter().map(|s| s.0.dim().0).max().expect("nonempty batch");
    let wt = slices.iter().map(|s| s.0.dim().1).max().expect("nonempty batch");
    let mut x = Array4::<f32>::zeros((n, 1, ht, wt));
    let mut y = Array4::<f32>::zeros((n, classes, ht, wt));
    let mut omega = Array4::<f32>::zeros((n, 1, ht, wt));
    for (bi, (image, labels, res)) in slices.iter().enumerate() {
        let (h, w) = image.dim();
        let gm = labels.mapv(|v| gm_ids.binary_search(&v).is_ok());
        let brain = labels.mapv(|v| brain_ids.binary_search(&v).is_ok());
        let wmap =
            slice_weight_map(labels, classes, &gm, &brain, mask_radius(*res), w_hires)?.total();
        for yy in 0..h {
            for xx in 0..w {
                x[[bi, 0, yy, xx]] = image[[yy, xx]] as f32;
                y[[bi, labels[[yy, xx]] as usize, yy, xx]] = 1.0;
                omega[[bi, 0, yy, xx]] = wmap[[yy, xx]] as f32;
            }
        }
    }
    Ok(BatchTensors { x, y, omega })
}

/// Whether an error is a numerical explosion (divergence) rather than a bug.
fn is_divergence(e: &TrainError) -> bool {
    matches!(
        e,
        TrainError::Graph(GraphError::NonFinite { .. })
            | TrainError::Model(ModelError::Graph(GraphError::NonFinite { .. }))
            | TrainError::Opt(OptError::NanGradient(..))
    )
}

/// Train one plane model over the manifest's train split, validating on the
/// val split each epoch. Deterministic given the seed. A numerical
/// divergence (non-finite loss or gradient) aborts the run and returns the
/// parameters from the last completed epoch.
pub fn train(
    spec: &NetworkSpec,
    settings: &TrainSettings,
    root: &Path,
    manifest: &Manifest,
    table: &LabelTable,
) -> Result<TrainOutcome, TrainError> {
    settings.augment.validate()?;
    let classes = classes_for_plane(table, spec.plane);
    if spec.classes != classes {
        return Err(TrainError::Config(format!(
            "spec has {} classes but plane {} needs {classes}",
            spec.classes, spec.plane
        )));
    }
    let train_items = load_slice_bank(root, manifest, Split::Train, table, spec.plane)?;
    if train_items.is_empty() {
        return Err(TrainError::EmptySplit(Split::Train));
    }
    let val_items = load_slice_bank(root, manifest, Split::Val, table, spec.plane)?;
    if val_items.is_empty() {
        return Err(TrainError::EmptySplit(Split::Val));
    }
    let (gm_ids, brain_ids) = plane_mask_ids(table, spec.plane);

    let mut model = Model::<f32>::build(spec, settings.seed);
    let mut adam = Adam::new(settings.opt, &model.store);
    let sched = WarmRestartSchedule {
        t0: settings.restart_t0,
        mult: settings.restart_mult,
        lr_max: settings.opt.lr,
        lr_min: settings.lr_min,
    };

    let mut last_good = model.store.clone();
    let mut log = Vec::new();
    let mut diverged = None;

    'epochs: for epoch in 0..settings.epochs {
        let lr = sched.lr_at_epoch(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(
            settings
                .seed
                .wrapping_add((epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
        );
        let batches = resolution_batches(&train_items, settings.batch, Some(&mut rng));
        let mut step_losses = Vec::with_capacity(batches.len());
        for (step, batch) in batches.iter().enumerate() {
            let result = train_step(
                &mut model,
                &mut adam,
                settings,
                &train_items,
                batch,
                classes,
                &gm_ids,
                &brain_ids,
                lr,
                &mut rng,
            );
            match result {
                Ok(loss) => step_losses.push(loss),
                Err(e) if is_divergence(&e) => {
                    diverged = Some(DivergenceInfo { epoch, step });
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        let mean_loss = step_losses.iter().sum::<f64>() / step_losses.len() as f64;
        let val_dsc = slice_val_dsc(&mut model, &val_items, settings.batch)?;
        log.push(EpochLog {
            epoch,
            lr,
            mean_loss,
            step_losses,
            val_dsc,
        });
        last_good = model.store.clone();
    }

    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            spec: spec.clone(),
            store: last_good,
        },
        log,
        diverged,
    })
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    model: &mut Model<f32>,
    adam: &mut Adam<f32>,
    settings: &TrainSettings,
    items: &[TrainItem],
    batch: &[usize],
    classes: usize,
    gm_ids: &[u16],
    brain_ids: &[u16],
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64, TrainError> {
    // The batch's nominal voxel size drives the scale factor; external
    // scaling is applied without telling the network (that is the point of
    // the augmentation), so only the weight-map radius sees the effective
    // resolution voxel_mm / s.
    let res_native = items[batch[0]].voxel_mm;
    let mut slices = Vec::with_capacity(batch.len());
    for &i in batch {
        let item = &items[i];
        let s = settings.augment.exsa_draw(rng);
        if settings.augment.exsa.enabled {
            let (image, labels) = exsa_apply(&settings.augment.exsa, &item.image, &item.labels, s)?;
            slices.push((image, labels, item.voxel_mm / s));
        } else {
            slices.push((item.image.clone(), item.labels.clone(), item.voxel_mm));
        }
    }
    let alpha = insa_sample(&settings.augment.insa, rng);
    let tensors = assemble_batch(&slices, classes, gm_ids, brain_ids, settings.w_hires)?;

    let mut g = Graph::new(true);
    let bound = model.bind(&mut g);
    let x = g.input(tensors.x);
    let p = model.forward(&mut g, &bound, x, res_native, alpha, BnMode::Train)?;
    let loss = composite_loss(&mut g, p, &tensors.y, &tensors.omega)?;
    let loss_value = g.value(loss.total)[[0, 0, 0, 0]] as f64;
    g.backward(loss.total)?;
    let grads: Vec<Option<FeatureMap<f32>>> = model
        .store
        .iter()
        .map(|(id, e)| {
            if e.trainable {
                g.grad(bound.node(id)).cloned()
            } else {
                None
            }
        })
        .collect();
    adam.step(&mut model.store, &grads, lr)?;
    Ok(loss_value)
}

/// Mean DSC (×100) over foreground classes, accumulated across all slices of
/// the given items (equivalent to volume-level DSC when the items cover whole
/// volumes). Classes absent from both truth and prediction are skipped.
pub fn slice_val_dsc(
    model: &mut Model<f32>,
    items: &[TrainItem],
    batch: usize,
) -> Result<f64, TrainError> {
    let classes = model.spec.classes;
    let mut inter = vec![0u64; classes];
    let mut truth = vec![0u64; classes];
    let mut pred = vec![0u64; classes];
    for b in resolution_batches(items, batch, None) {
        let res = items[b[0]].voxel_mm;
        let n = b.len();
        let (h, w) = items[b[0]].image.dim();
        let mut x = Array4::<f32>::zeros((n, 1, h, w));
        for (bi, &i) in b.iter().enumerate() {
            for yy in 0..h {
                for xx in 0..w {
                    x[[bi, 0, yy, xx]] = items[i].image[[yy, xx]] as f32;
                }
            }
        }
        let mut g = Graph::new(false);
        let bound = model.bind(&mut g);
        let xn = g.input(x);
        let p = model.forward(&mut g, &bound, xn, res, 0.0, BnMode::Eval)?;
        let pv = g.value(p);
        for (bi, &i) in b.iter().enumerate() {
            for yy in 0..h {
                for xx in 0..w {
                    let mut best = 0usize;
                    let mut bv = pv[[bi, 0, yy, xx]];
                    for c in 1..classes {
                        let v = pv[[bi, c, yy, xx]];
                        if v > bv {
                            bv = v;
                            best = c;
                        }
                    }
                    let t = items[i].labels[[yy, xx]] as usize;
                    truth[t] += 1;
                    pred[best] += 1;
                    if t == best {
                        inter[t] += 1;
                    }
                }
            }
        }
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for c in 1..classes {
        let den = truth[c] + pred[c];
        if den > 0 {
            sum += 100.0 * 2.0 * inter[c] as f64 / den as f64;
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Slice-wise inference of one plane model over a conformed volume: per-class
/// probabilities restacked to (C, D, H, W) at the native dims, scale
/// perturbation off.
pub fn infer_volume(
    model: &mut Model<f32>,
    volume: &IntensityVolume,
    batch: usize,
) -> Result<Array4<f64>, TrainError> {
    if model.spec.arch.normalizes_resolution()
        && !(VOLUME_VOXEL_MM.0..=VOLUME_VOXEL_MM.1).contains(&volume.voxel_mm)
    {
        return Err(TrainError::Config(format!(
            "voxel size {} mm outside supported range [{}, {}]",
            volume.voxel_mm, VOLUME_VOXEL_MM.0, VOLUME_VOXEL_MM.1
        )));
    }
    let classes = model.spec.classes;
    let (d0, d1, d2) = volume.data.dim();
    let (axis, depth, h, w) = match model.spec.plane {
        Plane::Axial => (Axis(0), d0, d1, d2),
        Plane::Coronal => (Axis(1), d1, d0, d2),
        Plane::Sagittal => (Axis(2), d2, d0, d1),
    };
    let mut out = Array4::<f64>::zeros((classes, d0, d1, d2));
    let mut start = 0usize;
    while start < depth {
        let n = batch.min(depth - start);
        let mut x = Array4::<f32>::zeros((n, 1, h, w));
        for bi in 0..n {
            let slice = volume.data.index_axis(axis, start + bi);
            for yy in 0..h {
                for xx in 0..w {
                    x[[bi, 0, yy, xx]] = slice[[yy, xx]] as f32;
                }
            }
        }
        let mut g = Graph::new(false);
        let bound = model.bind(&mut g);
        let xn = g.input(x);
        let p = model.forward(&mut g, &bound, xn, volume.voxel_mm, 0.0, BnMode::Eval)?;
        let pv = g.value(p);
        for bi in 0..n {
            for c in 0..classes {
                let mut plane_view = out.index_axis_mut(Axis(0), c);
                let mut target = plane_view.index_axis_mut(axis, start + bi);
                for yy in 0..h {
                    for xx in 0..w {
                        target[[yy, xx]] = pv[[bi, c, yy, xx]] as f64;
                    }
                }
            }
        }
        start += n;
    }
    Ok(out)
}

/// Per-voxel argmax of a (C, D, H, W) probability volume; ties go to the
/// lowest class id.
pub fn argmax_labels(probs: &Array4<f64>, voxel_mm: f64) -> LabelVolume {
    let (classes, d0, d1, d2) = probs.dim();
    let mut data = Array3::<u16>::zeros((d0, d1, d2));
    for k in 0..d0 {
        for j in 0..d1 {
            for i in 0..d2 {
                let mut best = 0usize;
                let mut bv = probs[[0, k, j, i]];
                for c in 1..classes {
                    let v = probs[[c, k, j, i]];
                    if v > bv {
                        bv = v;
                        best = c;
                    }
                }
                data[[k, j, i]] = best as u16;
            }
        }
    }
    LabelVolume { voxel_mm, data }
}

/// The full three-view segmentation pipeline: slice-wise inference per
/// plane, sagittal-broadcast aggregation, and full-space laterality restore.
/// Output dims equal input dims.
pub fn segment_volume(
    axial: &mut Model<f32>,
    coronal: &mut Model<f32>,
    sagittal: &mut Model<f32>,
    volume: &IntensityVolume,
    table: &LabelTable,
    weights: AggregateWeights,
    batch: usize,
) -> Result<(LabelVolume, RestoreReport), TrainError> {
    for (model, plane) in [
        (&*axial, Plane::Axial),
        (&*coronal, Plane::Coronal),
        (&*sagittal, Plane::Sagittal),
    ] {
        if model.spec.plane != plane {
            return Err(TrainError::Config(format!(
                "expected a {plane} model, got {}",
                model.spec.plane
            )));
        }
        let want = classes_for_plane(table, plane);
        if model.spec.classes != want {
            return Err(TrainError::Config(format!(
                "{plane} model has {} classes, table needs {want}",
                model.spec.classes
            )));
        }
    }
    let p_ax = infer_volume(axial, volume, batch)?;
    let p_co = infer_volume(coronal, volume, batch)?;
    let p_sa = infer_volume(sagittal, volume, batch)?;
    let merged = view_aggregate(&p_ax, &p_co, &p_sa, table, weights, volume.voxel_mm)?;
    Ok(restore_laterality_full(&merged, table))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::BlockConfig;
    use crate::data::{render_phantom, save_intensity, save_labels, ManifestEntry, PhantomSpec};
    use crate::model::Arch;
    use crate::resnorm::SampleKernel;
    use tempfile::TempDir;

    fn tiny_spec(arch: Arch, plane: Plane, classes: usize, filters: usize) -> NetworkSpec {
        NetworkSpec {
            arch,
            plane,
            classes,
            block: BlockConfig {
                filters,
                kernel: (3, 3),
                attention: false,
            },
            sampler: SampleKernel::Bilinear,
            res_inner: 1.0,
        }
    }

    /// Render phantoms to VVOL pairs under a tempdir and return the manifest.
    fn phantom_world(resolutions: &[(f64, Split)], fov: f64) -> (TempDir, Manifest) {
        let table = LabelTable::desk();
        let dir = TempDir::new().unwrap();
        let mut manifest = Manifest::default();
        for (i, &(res, split)) in resolutions.iter().enumerate() {
            let mut spec = PhantomSpec::desk(100 + i as u64);
            spec.fov_mm = fov;
            let (raw, labels) = render_phantom(&spec, res, &table).unwrap();
            let image = crate::data::conform(&raw, [res; 3]).unwrap();
            let prefix = format!("p{i:02}");
            save_intensity(&image, &dir.path().join(format!("{prefix}.img.vvol"))).unwrap();
            save_labels(&labels, &dir.path().join(format!("{prefix}.lab.vvol"))).unwrap();
            manifest.entries.push(ManifestEntry {
                prefix,
                voxel_mm: res,
                split,
            });
        }
        (dir, manifest)
    }

    fn quick_settings(epochs: usize, seed: u64) -> TrainSettings {
        TrainSettings {
            epochs,
            batch: 4,
            seed,
            w_hires: 1.0,
            ..TrainSettings::default()
        }
    }

    #[test]
    fn empty_split_is_rejected() {
        let table = LabelTable::desk();
        let spec = tiny_spec(Arch::Vinn, Plane::Axial, 9, 4);
        let manifest = Manifest::default();
        let err = train(
            &spec,
            &quick_settings(1, 0),
            Path::new("/nonexistent"),
            &manifest,
            &table,
        )
        .unwrap_err();
        assert!(matches!(err, TrainError::EmptySplit(Split::Train)));
    }

    #[test]
    fn class_count_mismatch_is_rejected() {
        let table = LabelTable::desk();
        // Sagittal trains on merged labels (6 classes), not 9.
        let spec = tiny_spec(Arch::Vinn, Plane::Sagittal, 9, 4);
        let (dir, manifest) = phantom_world(&[(2.0, Split::Train), (2.0, Split::Val)], 32.0);
        let err = train(
            &spec,
            &quick_settings(1, 0),
            dir.path(),
            &manifest,
            &table,
        )
        .unwrap_err();
        assert!(matches!(err, TrainError::Config(_)), "got {err}");
    }

    #[test]
    fn resolution_groups_never_mix_dims() {
        let mk = |n: usize, d: usize, res: f64| {
            (0..n)
                .map(|_| TrainItem {
                    image: Array2::zeros((d, d)),
                    labels: Array2::zeros((d, d)),
                    voxel_mm: res,
                })
                .collect::<Vec<_>>()
        };
        let mut items = mk(5, 24, 2.0);
        items.extend(mk(7, 48, 1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batches = resolution_batches(&items, 4, Some(&mut rng));
        assert_eq!(batches.iter().map(Vec::len).sum::<usize>(), 12);
        for b in &batches {
            let res = items[b[0]].voxel_mm;
            assert!(b.iter().all(|&i| items[i].voxel_mm == res));
        }
        // Same seed reproduces the same order.
        let mut rng2 = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(batches, resolution_batches(&items, 4, Some(&mut rng2)));
    }

    #[test]
    fn training_run_is_bit_reproducible() {
        let table = LabelTable::desk();
        let spec = tiny_spec(Arch::Vinn, Plane::Axial, 9, 4);
        let (dir, manifest) = phantom_world(&[(2.0, Split::Train), (2.0, Split::Val)], 32.0);
        let run = || {
            train(
                &spec,
                &quick_settings(2, 7),
                dir.path(),
                &manifest,
                &table,
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert!(a.diverged.is_none());
        for (ea, eb) in a.log.iter().zip(&b.log) {
            assert_eq!(ea.step_losses, eb.step_losses, "epoch {}", ea.epoch);
            assert_eq!(ea.val_dsc, eb.val_dsc);
        }
        for ((_, pa), (_, pb)) in a.checkpoint.store.iter().zip(b.checkpoint.store.iter()) {
            assert_eq!(pa.value, pb.value, "parameter {} differs", pa.name);
        }
    }

    #[test]
    fn augmented_training_is_reproducible_and_learns() {
        let table = LabelTable::desk();
        let spec = tiny_spec(Arch::CnnStar, Plane::Coronal, 9, 4);
        let mut settings = quick_settings(2, 11);
        settings.augment.exsa.enabled = true;
        settings.augment.insa.enabled = true;
        let (dir, manifest) = phantom_world(&[(2.0, Split::Train), (2.0, Split::Val)], 32.0);
        let a = train(&spec, &settings, dir.path(), &manifest, &table).unwrap();
        let b = train(&spec, &settings, dir.path(), &manifest, &table).unwrap();
        assert_eq!(a.log[0].step_losses, b.log[0].step_losses);
        assert!(a.diverged.is_none());
        let first = a.log.first().unwrap().mean_loss;
        let last = a.log.last().unwrap().mean_loss;
        assert!(
            last < first,
            "loss should fall over two epochs: {first} -> {last}"
        );
    }

    #[test]
    fn vinn_and_cnn_star_losses_agree_at_unit_scale() {
        // With scale perturbation off and data at the inner resolution the
        // resampling layers are exact identities, so the two architectures
        // compute the same function and every training step matches.
        let table = LabelTable::desk();
        let (dir, manifest) = phantom_world(&[(1.0, Split::Train), (1.0, Split::Val)], 24.0);
        let settings = quick_settings(1, 5);
        let run = |arch: Arch| {
            let spec = tiny_spec(arch, Plane::Axial, 9, 4);
            train(&spec, &settings, dir.path(), &manifest, &table).unwrap()
        };
        let v = run(Arch::Vinn);
        let c = run(Arch::CnnStar);
        let (lv, lc) = (&v.log[0].step_losses, &c.log[0].step_losses);
        assert_eq!(lv.len(), lc.len());
        for (a, b) in lv.iter().zip(lc) {
            assert!(
                (a - b).abs() <= 1e-4 * a.abs().max(1.0),
                "step losses diverge: {a} vs {b}"
            );
        }
    }

    #[test]
    fn divergence_aborts_with_last_good_checkpoint() {
        let table = LabelTable::desk();
        let spec = tiny_spec(Arch::Vinn, Plane::Axial, 9, 4);
        let mut settings = quick_settings(2, 13);
        settings.opt.lr = 1e30; // guarantees a numerical explosion
        let (dir, manifest) = phantom_world(&[(2.0, Split::Train), (2.0, Split::Val)], 32.0);
        let out = train(&spec, &settings, dir.path(), &manifest, &table).unwrap();
        let info = out.diverged.expect("run must diverge");
        assert_eq!(info.epoch, 0);
        // The checkpoint is the initialization (no epoch completed).
        let init = Model::<f32>::build(&spec, settings.seed);
        for ((_, got), (_, want)) in out.checkpoint.store.iter().zip(init.store.iter()) {
            assert_eq!(got.value, want.value, "{} was mutated", got.name);
        }
    }

    #[test]
    fn inference_dims_match_input_and_ids_are_tabled() {
        let table = LabelTable::desk();
        let (raw, _) = render_phantom(&PhantomSpec::desk(42), 0.9, &table).unwrap();
        let volume = crate::data::conform(&raw, [0.9; 3]).unwrap();
        let dims = volume.data.dim();
        let mut ax = Model::<f32>::build(&tiny_spec(Arch::Vinn, Plane::Axial, 9, 4), 1);
        let mut co = Model::<f32>::build(&tiny_spec(Arch::Vinn, Plane::Coronal, 9, 4), 2);
        let mut sa = Model::<f32>::build(&tiny_spec(Arch::Vinn, Plane::Sagittal, 6, 4), 3);
        let (seg, _) = segment_volume(
            &mut ax,
            &mut co,
            &mut sa,
            &volume,
            &table,
            AggregateWeights::default(),
            8,
        )
        .unwrap();
        assert_eq!(seg.data.dim(), dims);
        assert_eq!(seg.voxel_mm, volume.voxel_mm);
        let ids: Vec<u16> = table.entries().iter().map(|e| e.id).collect();
        assert!(seg.data.iter().all(|v| ids.contains(v)));
    }

    #[test]
    fn single_plane_probabilities_cover_native_grid() {
        let table = LabelTable::desk();
        let (raw, _) = render_phantom(&PhantomSpec::desk(8), 1.4, &table).unwrap();
        let volume = crate::data::conform(&raw, [1.4; 3]).unwrap();
        let mut m = Model::<f32>::build(&tiny_spec(Arch::Vinn, Plane::Coronal, 9, 4), 4);
        let p = infer_volume(&mut m, &volume, 8).unwrap();
        let (c, d0, d1, d2) = p.dim();
        assert_eq!(c, 9);
        assert_eq!((d0, d1, d2), volume.data.dim());
        // Probabilities sum to one on every voxel (softmax restacked).
        let mut worst = 0.0f64;
        for k in 0..d0 {
            for j in 0..d1 {
                for i in 0..d2 {
                    let s: f64 = (0..c).map(|cc| p[[cc, k, j, i]]).sum();
                    worst = worst.max((s - 1.0).abs());
                }
            }
        }
        assert!(worst < 1e-5, "probability sums drift: {worst}");
        let lab = argmax_labels(&p, volume.voxel_mm);
        assert_eq!(lab.data.dim(), volume.data.dim());
    }

    #[test]
    fn out_of_range_voxel_size_is_rejected() {
        let mut m = Model::<f32>::build(&tiny_spec(Arch::Vinn, Plane::Axial, 9, 4), 1);
        let volume = IntensityVolume {
            voxel_mm: 2.5,
            data: ndarray::Array3::zeros((8, 8, 8)),
        };
        assert!(matches!(
            infer_volume(&mut m, &volume, 4),
            Err(TrainError::Config(_))
        ));
    }
}
