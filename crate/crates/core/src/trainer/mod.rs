//! The omni-supervised training loop: loss routing per granularity, Adam,
//! plateau schedule, teacher and prototype updates, logging and checkpoints.

mod checkpoint;
mod optim;
mod schedule;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use optim::Adam;
pub use schedule::{lr_schedule, PlateauSchedule};

use std::fs::OpenOptions;
use std::path::Path;

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::daa::WeakForward;
use crate::data::{augment, compose_batch, resize_sample, AugmentParams, BatchSpec, Dataset, Pools};
use crate::detector::{
    anchors_for, assign_targets, decode_and_nms, dense_focal, dense_regression, AnchorSet, FocalLoss, Network,
    OutputGrads,
};
use crate::distill::{dense_soft_focal, SoftFocal, TeacherState};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalResult, EvalToken, ImageEval};
use crate::gpa::{aggregate_backward, aggregate_features, inter_loss, intra_loss, CategoryFeature, PrototypeBank};
use crate::numeric::mix_seed;
use crate::parallel::Exec;
use crate::types::{Config, Detection, Granularity, Sample};

const TAG_INIT: u64 = 0x1;
const TAG_BATCH: u64 = 0x2;
const TAG_AUGMENT: u64 = 0x3;

/// Per-step loss values. Each component is averaged over the batch samples
/// that qualify for it and is 0 when none do.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub lr: f64,
    pub focal: f64,
    pub reg: f64,
    pub bce: f64,
    pub intra: f64,
    pub inter: f64,
    pub sfl: f64,
    pub total: f64,
}

/// Result of [`Trainer::batch_gradient`].
#[derive(Debug, Clone)]
pub struct BatchGradient {
    pub report: LossReport,
    /// Gradient of the weighted total with respect to the student parameters.
    pub grads: Vec<f64>,
    pub features: Vec<CategoryFeature>,
}

/// Mutable training state. Everything needed to continue a run bit-identically.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: Vec<f64>,
    pub teacher: TeacherState,
    pub bank: PrototypeBank,
    pub adam: Adam,
    pub schedule: PlateauSchedule,
    pub step: u64,
}

impl TrainState {
    pub fn new(net: &Network, config: &Config) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[config.seed, TAG_INIT]));
        let params = net.init_params(&mut rng);
        TrainState {
            teacher: TeacherState::from_student(&params, config.lambda),
            bank: PrototypeBank::new(config.num_classes, config.channels, config.beta),
            adam: Adam::new(
                params.len(),
                config.learning_rate,
                config.adam_beta1,
                config.adam_beta2,
                config.adam_eps,
            ),
            schedule: PlateauSchedule::new(config.lr_patience, config.lr_min_delta, config.lr_floor),
            params,
            step: 0,
        }
    }
}

/// Which losses a batch sample takes part in, given the config and step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Routing {
    supervised: bool,
    weak: bool,
    gpa: bool,
    distill: bool,
}

impl Routing {
    fn for_sample(g: Granularity, config: &Config, aux: bool) -> Self {
        Routing {
            supervised: g == Granularity::Full,
            weak: aux && config.enable_weak && g.has_image_labels(),
            gpa: aux && config.enable_gpa && g.has_image_labels(),
            distill: aux && config.enable_distill && g != Granularity::Full,
        }
    }

    fn any(&self) -> bool {
        self.supervised || self.weak || self.gpa || self.distill
    }
}

struct SampleResult {
    /// Raw (unnormalized by sample count) focal, reg, bce, intra, inter, sfl.
    losses: [f64; 6],
    grads: Option<Vec<f64>>,
    features: Vec<CategoryFeature>,
}

/// Owns the network description and the training state.
pub struct Trainer {
    pub config: Config,
    pub net: Network,
    pub anchors: AnchorSet,
    pub state: TrainState,
    pub exec: Exec,
}

impl Trainer {
    pub fn new(config: Config, exec: Exec) -> Result<Self> {
        config.validate()?;
        let net = Network::from_config(&config);
        let anchors = anchors_for(&config);
        let state = TrainState::new(&net, &config);
        Ok(Trainer {
            config,
            net,
            anchors,
            state,
            exec,
        })
    }

    /// Rebuilds a trainer from a checkpoint.
    pub fn from_checkpoint(ckpt: Checkpoint, exec: Exec) -> Result<Self> {
        let mut t = Trainer::new(ckpt.config.clone(), exec)?;
        if ckpt.state.params.len() != t.net.num_params() {
            return Err(Error::Shape(format!(
                "checkpoint has {} parameters, network needs {}",
                ckpt.state.params.len(),
                t.net.num_params()
            )));
        }
        t.state = ckpt.state;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            state: self.state.clone(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.state.adam.lr
    }

    fn aux_enabled(&self) -> bool {
        self.state.step >= self.config.warm_start_steps
    }

    /// Configured quotas, with granularities that no enabled loss reads or
    /// whose pool is empty dropped to zero.
    pub fn batch_spec(&self, pools: &Pools) -> BatchSpec {
        let c = &self.config;
        let used = |g: Granularity| match g {
            Granularity::Full => true,
            Granularity::Weak => c.enable_weak || c.enable_gpa || c.enable_distill,
            Granularity::Unlabeled => c.enable_distill,
        };
        let quota = |g: Granularity, q: usize| {
            if q > 0 && used(g) && pools.get(g).is_empty() {
                warn!("{g:?} quota {q} requested but the pool is empty; skipping");
            }
            if used(g) && !pools.get(g).is_empty() {
                q
            } else {
                0
            }
        };
        BatchSpec::new(
            quota(Granularity::Full, c.batch_full),
            quota(Granularity::Weak, c.batch_weak),
            quota(Granularity::Unlabeled, c.batch_unlabeled),
        )
    }

    /// Training batch for the current step: drawn by [`compose_batch`] and augmented.
    pub fn make_batch(&self, dataset: &Dataset, pools: &Pools) -> Result<Vec<Sample>> {
        let c = &self.config;
        let spec = self.batch_spec(pools);
        let picks = compose_batch(pools, &spec, mix_seed(&[c.seed, TAG_BATCH]), self.state.step)?;
        let params = AugmentParams {
            flip_prob: c.flip_prob,
            max_shift: c.max_shift,
            size: c.image_size,
        };
        picks
            .iter()
            .enumerate()
            .map(|(k, &(i, _))| {
                let s = dataset.sample(i)?;
                Ok(if c.augment {
                    augment(&s, mix_seed(&[c.seed, TAG_AUGMENT, self.state.step, k as u64]), &params)
                } else {
                    resize_sample(&s, c.image_size)
                })
            })
            .collect()
    }

    fn sample_pass(&self, sample: &Sample, route: Routing, scale: &[f64; 6]) -> Result<SampleResult> {
        let c = &self.config;
        let mut losses = [0.0; 6];
        let mut features = Vec::new();
        if !route.any() {
            return Ok(SampleResult {
                losses,
                grads: None,
                features,
            });
        }
        let params = &self.state.params;
        let (out, cache) = self.net.forward(params, &sample.image)?;
        let mut g = OutputGrads::zeros_like(&out);

        if route.supervised {
            let boxes = sample.boxes().ok_or_else(|| Error::Invalid(format!("{} has no boxes", sample.id)))?;
            let targets = assign_targets(boxes, &self.anchors, c.pos_iou, c.neg_iou);
            let (lf, dcls) = dense_focal(&out, &targets, &self.anchors, FocalLoss::new(c.alpha, c.gamma));
            let (lr, dreg) = dense_regression(&out, &targets, &self.anchors);
            losses[0] = lf;
            losses[1] = lr;
            for (gl, d) in g.cls_logits.iter_mut().zip(&dcls) {
                gl.add_scaled(d, scale[0]);
            }
            for (gl, d) in g.reg.iter_mut().zip(&dreg) {
                gl.add_scaled(d, scale[1]);
            }
        }

        if route.weak || route.gpa {
            let labels = sample
                .image_labels()
                .ok_or_else(|| Error::Unlabeled(sample.id.clone()))?;
            let wf = WeakForward::new(&out, c.pooling);
            let mut dr = wf.attention.local_attention.zeros_like();
            if route.weak {
                let (lb, dx, drb) = wf.bce(labels, scale[2]);
                losses[2] = lb;
                g.global_attention.add_assign(&dx);
                dr.add_assign(&drb);
            }
            if route.gpa {
                let present: Vec<usize> = (0..c.num_classes).filter(|&k| labels[k] == 1.0).collect();
                let local = &wf.attention.local_attention;
                let feats: Vec<Vec<f64>> = present
                    .iter()
                    .map(|&k| aggregate_features(&out.feature, local.plane(k)))
                    .collect::<Result<_>>()?;
                let class_feats: Vec<(usize, &[f64])> =
                    present.iter().zip(&feats).map(|(&k, f)| (k, f.as_slice())).collect();
                let (li, gi) = intra_loss(&class_feats, &self.state.bank);
                let (le, ge) = inter_loss(&class_feats, &self.state.bank, c.delta);
                losses[3] = li;
                losses[4] = le;
                for (n, &k) in present.iter().enumerate() {
                    let df: Vec<f64> = gi[n].iter().zip(&ge[n]).map(|(a, b)| scale[3] * a + scale[4] * b).collect();
                    let drk = aggregate_backward(&out.feature, local.plane(k), &df, &mut g.feature);
                    for (d, v) in dr.plane_mut(k).iter_mut().zip(drk) {
                        *d += v;
                    }
                }
                features = present
                    .iter()
                    .zip(feats)
                    .map(|(&k, feature)| CategoryFeature {
                        class_id: k,
                        feature,
                        confidence: wf.predictions[k],
                    })
                    .collect();
            }
            for (gl, d) in g.cls_logits.iter_mut().zip(wf.local_backward(&dr, &out)) {
                gl.add_assign(&d);
            }
        }

        if route.distill {
            let tout = self.state.teacher.predict(&self.net, &sample.image)?;
            let (ls, dcls) = dense_soft_focal(&out, &tout, SoftFocal::new(c.alpha, c.epsilon, c.gamma));
            losses[5] = ls;
            for (gl, d) in g.cls_logits.iter_mut().zip(&dcls) {
                gl.add_scaled(d, scale[5]);
            }
        }

        let mut grads = vec![0.0; params.len()];
        self.net.backward(params, &cache, &g, &mut grads);
        Ok(SampleResult {
            losses,
            grads: Some(grads),
            features,
        })
    }

    /// Losses, summed parameter gradient and category features of a batch at
    /// the current parameters. Nothing is updated.
    pub fn batch_gradient(&self, batch: &[Sample]) -> Result<BatchGradient> {
        let c = &self.config;
        let aux = self.aux_enabled();
        let routes: Vec<Routing> = batch.iter().map(|s| Routing::for_sample(s.granularity, c, aux)).collect();
        let count = |f: fn(&Routing) -> bool| routes.iter().filter(|r| f(r)).count().max(1) as f64;
        let n_sup = count(|r| r.supervised);
        let n_weak = count(|r| r.weak);
        let n_gpa = count(|r| r.gpa);
        let n_dis = count(|r| r.distill);
        let counts = [n_sup, n_sup, n_weak, n_gpa, n_gpa, n_dis];
        let weights = [
            c.weight_focal,
            c.weight_reg,
            c.weight_bce,
            c.weight_intra,
            c.weight_inter,
            c.weight_sfl,
        ];
        let mut scale = [0.0; 6];
        for k in 0..6 {
            scale[k] = weights[k] / counts[k];
        }

        let work: Vec<(&Sample, Routing)> = batch.iter().zip(routes.iter().copied()).collect();
        let results = self.exec.map(&work, |&(s, r)| self.sample_pass(s, r, &scale));

        let mut grads = vec![0.0; self.state.params.len()];
        let mut sums = [0.0; 6];
        let mut features = Vec::new();
        for r in results {
            let r = r?;
            for k in 0..6 {
                sums[k] += r.losses[k];
            }
            if let Some(g) = r.grads {
                for (a, b) in grads.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            features.extend(r.features);
        }
        let means: Vec<f64> = (0..6).map(|k| sums[k] / counts[k]).collect();
        let total: f64 = (0..6).map(|k| weights[k] * means[k]).sum();
        let report = LossReport {
            step: self.state.step,
            lr: self.state.adam.lr,
            focal: means[0],
            reg: means[1],
            bce: means[2],
            intra: means[3],
            inter: means[4],
            sfl: means[5],
            total,
        };
        Ok(BatchGradient {
            report,
            grads,
            features,
        })
    }

    /// One optimizer step on an already composed batch, followed by one teacher
    /// EMA update and one prototype update.
    pub fn train_step(&mut self, batch: &[Sample]) -> Result<LossReport> {
        let update_bank = self.aux_enabled() && self.config.enable_gpa;
        let BatchGradient {
            report,
            grads,
            features,
        } = self.batch_gradient(batch)?;
        let st = &mut self.state;
        st.adam.step(&mut st.params, &grads);
        st.teacher.update(&st.params)?;
        if update_bank {
            st.bank.update(&features);
        }
        st.step += 1;
        Ok(report)
    }

    /// Records a validation mAP with the plateau schedule and applies the new rate.
    pub fn observe_validation(&mut self, map: f64) -> f64 {
        let lr = self.state.schedule.observe(map, self.state.adam.lr);
        if lr != self.state.adam.lr {
            info!("step {}: validation plateau, lr {} -> {}", self.state.step, self.state.adam.lr, lr);
        }
        self.state.adam.lr = lr;
        lr
    }

    /// Detections of the student on every image of `dataset`, in original pixel coordinates.
    pub fn predict_dataset(&self, dataset: &Dataset) -> Result<Vec<Vec<Detection>>> {
        predict_dataset(&self.net, &self.state.params, &self.config, dataset, self.exec)
    }

    /// Student mAP on a dataset, ground truth including the withheld boxes.
    pub fn evaluate(&self, dataset: &Dataset) -> Result<EvalResult> {
        let dets = self.predict_dataset(dataset)?;
        evaluate_detections(dataset, dets, self.exec)
    }

    /// Trains until `config.steps`, logging every step to `losses.csv` and each
    /// validation to `eval.csv` in `out_dir`, and writing `checkpoint.bin` at every
    /// evaluation and at the end.
    pub fn run(&mut self, train: &Dataset, val: Option<&Dataset>, out_dir: &Path) -> Result<Vec<LossReport>> {
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;
        let pools = Pools::from_manifest(&train.manifest);
        let resume = self.state.step > 0;
        let mut loss_log = csv_appender(&out_dir.join("losses.csv"), resume)?;
        let mut eval_log = csv_appender(&out_dir.join("eval.csv"), resume)?;
        let ckpt_path = out_dir.join("checkpoint.bin");
        let mut reports = Vec::new();
        while self.state.step < self.config.steps {
            let batch = self.make_batch(train, &pools)?;
            let report = self.train_step(&batch)?;
            loss_log.serialize(report)?;
            if report.step % 50 == 0 {
                info!(
                    "step {} total {:.4} focal {:.4} reg {:.4} bce {:.4} intra {:.4} inter {:.4} sfl {:.5}",
                    report.step, report.total, report.focal, report.reg, report.bce, report.intra, report.inter, report.sfl
                );
            }
            reports.push(report);
            let done = self.state.step;
            if self.config.eval_interval > 0 && done % self.config.eval_interval == 0 {
                if let Some(val) = val {
                    let r = self.evaluate(val)?;
                    let lr = self.observe_validation(r.map);
                    info!("step {done}: validation mAP {:.4}", r.map);
                    eval_log.serialize(EvalRow {
                        step: done,
                        map: r.map,
                        lr,
                    })?;
                    eval_log.flush().map_err(|e| Error::io("writing eval log", e))?;
                }
                save_checkpoint(&ckpt_path, &self.checkpoint())?;
            }
        }
        loss_log.flush().map_err(|e| Error::io("writing loss log", e))?;
        save_checkpoint(&ckpt_path, &self.checkpoint())?;
        Ok(reports)
    }
}

/// One line of `eval.csv`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub step: u64,
    pub map: f64,
    pub lr: f64,
}

fn csv_appender(path: &Path, append: bool) -> Result<csv::Writer<std::fs::File>> {
    let exists = append && path.exists();
    let f = OpenOptions::new()
        .create(true)
        .write(true)
        .append(exists)
        .truncate(!exists)
        .open(path)
        .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    Ok(csv::WriterBuilder::new().has_headers(!exists).from_writer(f))
}

/// Reads a `losses.csv` written by [`Trainer::run`].
pub fn read_loss_log(path: &Path) -> Result<Vec<LossReport>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn read_eval_log(path: &Path) -> Result<Vec<EvalRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Runs the detector on every image, resizing to the network input and mapping
/// boxes back to the image's own pixel grid.
pub fn predict_dataset(
    net: &Network,
    params: &[f64],
    config: &Config,
    dataset: &Dataset,
    exec: Exec,
) -> Result<Vec<Vec<Detection>>> {
    let anchors = anchors_for(config);
    let size = config.image_size;
    let results = exec.map_range(dataset.images.len(), |i| -> Result<Vec<Detection>> {
        let img = &dataset.images[i];
        let input = resize_sample(&Sample::unlabeled("", img.clone()), size);
        let out = net.predict(params, &input.image)?;
        let sx = img.width as f64 / size as f64;
        let sy = img.height as f64 / size as f64;
        Ok(
            decode_and_nms(&out, &anchors, size, config.score_thresh, config.nms_iou, config.max_dets)
                .into_iter()
                .map(|d| Detection {
                    bbox: d.bbox.scaled(sx, sy),
                    ..d
                })
                .collect(),
        )
    });
    results.into_iter().collect()
}

/// Scores per-image detections against the dataset's full ground truth,
/// reading the withheld sidecar for weak and unlabeled records.
pub fn evaluate_detections(dataset: &Dataset, detections: Vec<Vec<Detection>>, exec: Exec) -> Result<EvalResult> {
    if detections.len() != dataset.manifest.len() {
        return Err(Error::Shape(format!(
            "{} detection lists for {} images",
            detections.len(),
            dataset.manifest.len()
        )));
    }
    let token = EvalToken::new();
    let images: Vec<ImageEval> = dataset
        .manifest
        .records
        .iter()
        .zip(detections)
        .map(|(rec, dets)| {
            let gt = match &rec.boxes {
                Some(b) => b.clone(),
                None => dataset
                    .hidden
                    .reveal(&token)
                    .get(&rec.id)
                    .cloned()
                    .ok_or_else(|| Error::Invalid(format!("no ground truth for {}", rec.id)))?,
            };
            Ok(ImageEval {
                image_id: rec.id.clone(),
                detections: dets,
                ground_truth: gt,
            })
        })
        .collect::<Result<_>>()?;
    evaluate(&images, dataset.manifest.num_classes, exec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{assign_granularity, generate_synthetic};

    fn small_config() -> Config {
        Config {
            image_size: 64,
            channels: 8,
            learning_rate: 1e-3,
            batch_full: 1,
            batch_weak: 1,
            batch_unlabeled: 1,
            steps: 3,
            ..Config::default()
        }
    }

    fn dataset(seed: u64) -> Dataset {
        let d = generate_synthetic(seed, 12, 64, 3, "train", Exec::Sequential).unwrap();
        let (manifest, hidden) = assign_granularity(&d.manifest, [0.34, 0.33, 0.33], seed).unwrap();
        Dataset {
            manifest,
            images: d.images,
            hidden,
        }
    }

    #[test]
    fn all_full_batch_has_no_sfl_and_all_unlabeled_only_sfl() {
        let data = dataset(1);
        let mut t = Trainer::new(small_config(), Exec::Sequential).unwrap();
        let pick = |g: Granularity| -> Vec<Sample> {
            (0..data.manifest.len())
                .filter(|&i| data.manifest.records[i].granularity == g)
                .take(2)
                .map(|i| data.sample(i).unwrap())
                .collect()
        };
        let r = t.train_step(&pick(Granularity::Full)).unwrap();
        assert_eq!(r.sfl, 0.0);
        assert!(r.focal > 0.0 && r.bce > 0.0);
        let r = t.train_step(&pick(Granularity::Unlabeled)).unwrap();
        assert!(r.sfl > 0.0);
        assert_eq!([r.focal, r.reg, r.bce, r.intra, r.inter], [0.0; 5]);
        assert_eq!(r.total, r.sfl);
    }

    #[test]
    fn sequential_and_parallel_steps_agree() {
        let data = dataset(2);
        let pools = Pools::from_manifest(&data.manifest);
        let mut a = Trainer::new(small_config(), Exec::Sequential).unwrap();
        let mut b = Trainer::new(small_config(), Exec::Parallel).unwrap();
        for _ in 0..3 {
            let ra = a.train_step(&a.make_batch(&data, &pools).unwrap()).unwrap();
            let rb = b.train_step(&b.make_batch(&data, &pools).unwrap()).unwrap();
            assert_eq!(ra, rb);
        }
        assert_eq!(a.state, b.state);
    }

    #[test]
    fn total_is_weighted_sum() {
        let data = dataset(3);
        let pools = Pools::from_manifest(&data.manifest);
        let cfg = Config {
            weight_focal: 2.0,
            weight_sfl: 0.5,
            weight_bce: 3.0,
            ..small_config()
        };
        let mut t = Trainer::new(cfg, Exec::Sequential).unwrap();
        for _ in 0..2 {
            let r = t.train_step(&t.make_batch(&data, &pools).unwrap()).unwrap();
            let want = 2.0 * r.focal + r.reg + 3.0 * r.bce + r.intra + r.inter + 0.5 * r.sfl;
            assert!((r.total - want).abs() < 1e-12);
        }
    }
}
