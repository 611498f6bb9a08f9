//! Epoch/batch training loop and evaluation.
//!
//! Per batch: accumulators are zeroed once, every image runs forward and
//! backward (adding into the accumulators), then the accumulators are
//! divided by the number of images in the batch and one Adam step is
//! taken. The interrupt hook is polled after every third image of the
//! session; an interrupt discards the partial batch and stops.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backward::GradientSet;
use crate::config::{Settings, TrainConfig, DEFAULT_SOURCE_SIDE};
use crate::dataset::{load_image, DatasetIndex, Sample, Split};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::forward::{ActivationSet, Net, ResizePlan};
use crate::numcore::{argmax, cross_entropy};
use crate::optimizer::{adam_step, AdamState};
use crate::params::ParamSet;
use crate::weightstore::WeightOrigin;

/// Images between two interrupt polls.
pub const INTERRUPT_POLL_INTERVAL: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatchRecord {
    pub epoch: usize,
    pub batch: usize,
    pub batches_in_epoch: usize,
    /// Mean loss over the images seen so far this epoch.
    pub loss: f32,
    /// Cumulative top-1 training accuracy this epoch, in percent.
    pub accuracy: f64,
    pub images_in_batch: usize,
    pub global_step: u64,
}

impl BatchRecord {
    /// `Batch B/N - Loss: X - Acc: Y%`
    pub fn log_line(&self) -> String {
        format!(
            "Batch {}/{} - Loss: {:.4} - Acc: {:.1}%",
            self.batch, self.batches_in_epoch, self.loss, self.accuracy
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalResult {
    pub total: usize,
    pub correct: usize,
    /// `[true class][predicted class]` counts.
    pub confusion: Vec<Vec<usize>>,
}

impl EvalResult {
    /// Percentage correct, absent for an empty set.
    pub fn accuracy(&self) -> Option<f64> {
        (self.total > 0).then(|| 100.0 * self.correct as f64 / self.total as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub batches: Vec<BatchRecord>,
    pub final_train_accuracy: Option<f64>,
    pub final_loss: Option<f32>,
    pub validation: Option<EvalResult>,
    pub images_processed: u64,
    pub interrupted: bool,
    pub origin: String,
}

impl TrainReport {
    pub fn validation_accuracy(&self) -> Option<f64> {
        self.validation.as_ref().and_then(EvalResult::accuracy)
    }
}

/// Hooks into the training loop: progress reporting and the interrupt
/// poll. All methods default to no-ops.
pub trait TrainObserver {
    fn on_epoch_start(&mut self, _epoch: usize, _epochs: usize) {}
    fn on_batch(&mut self, _record: &BatchRecord) {}
    fn poll_interrupt(&mut self) -> bool {
        false
    }
}

impl TrainObserver for () {}

/// Running loss/accuracy over one epoch.
#[derive(Debug, Clone, Copy, Default)]
struct EpochStats {
    loss_sum: f64,
    correct: usize,
    seen: usize,
}

impl EpochStats {
    fn mean_loss(&self) -> f32 {
        if self.seen == 0 {
            0.0
        } else {
            (self.loss_sum / self.seen as f64) as f32
        }
    }

    fn accuracy(&self) -> f64 {
        if self.seen == 0 {
            0.0
        } else {
            100.0 * self.correct as f64 / self.seen as f64
        }
    }
}

/// Outcome of one forward+backward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageOutcome {
    pub loss: f32,
    pub predicted: usize,
}

/// All mutable training state for one session, allocated once.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub net: Net,
    pub cfg: TrainConfig,
    pub plan: ResizePlan,
    pub weights: ParamSet,
    pub grads: GradientSet,
    pub adam: AdamState,
    pub acts: ActivationSet,
    pub origin: WeightOrigin,
}

impl Trainer {
    pub fn new(settings: &Settings, weights: ParamSet, origin: WeightOrigin) -> Result<Self> {
        let dims = settings.net.derive()?;
        weights.check_shape(&dims)?;
        let net = Net::new(dims, settings.policy);
        let source = DEFAULT_SOURCE_SIDE.max(dims.input_size);
        Ok(Self {
            plan: ResizePlan::new(dims.input_size, source)?,
            grads: GradientSet::new(&net),
            adam: AdamState::new(&dims),
            acts: net.activations(),
            net,
            cfg: settings.train,
            weights,
            origin,
        })
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.net.exec = exec;
        self
    }

    /// Starts a batch: clears the weight-gradient accumulators.
    pub fn begin_batch(&mut self) {
        self.grads.zero_batch_grads();
    }

    /// Forward and backward for one image already loaded into
    /// `self.acts.input`, accumulating into the batch gradients.
    pub fn accumulate_loaded(&mut self, class: usize) -> Result<ImageOutcome> {
        let probs = self.net.forward_loaded(&self.weights, &mut self.acts)?;
        let loss = cross_entropy(probs, class)?;
        let predicted = argmax(probs);
        self.net
            .backward_image(&self.acts, class, &self.weights, &mut self.grads)?;
        Ok(ImageOutcome { loss, predicted })
    }

    pub fn accumulate(&mut self, input: &[f32], class: usize) -> Result<ImageOutcome> {
        if input.len() != self.acts.input.len() {
            return Err(Error::Shape {
                name: "input",
                expected: self.acts.input.len(),
                actual: input.len(),
            });
        }
        self.acts.input.copy_from_slice(input);
        self.accumulate_loaded(class)
    }

    /// Converts the accumulated sums to means over `images` and takes one
    /// Adam step. Returns the bias-corrected step size used.
    pub fn finish_batch(&mut self, images: usize) -> Result<f32> {
        debug_assert!(images > 0);
        self.grads.scale(1.0 / images as f32);
        adam_step(
            &mut self.weights,
            &self.grads.acc,
            &mut self.adam,
            &self.cfg,
            &self.net.policy,
        )
    }

    /// Training order for one epoch: a permutation seeded with
    /// `shuffle_seed ^ epoch` (epoch counted from 0), or index order.
    pub fn epoch_order(&self, len: usize, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..len).collect();
        if self.cfg.shuffle_enabled {
            let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.shuffle_seed ^ epoch as u64);
            order.shuffle(&mut rng);
        }
        order
    }

    /// Runs the configured number of epochs over the index's training
    /// split, then evaluates the validation split.
    pub fn train(
        &mut self,
        index: &DatasetIndex,
        observer: &mut dyn TrainObserver,
    ) -> Result<TrainReport> {
        if index.num_classes() != self.net.dims.num_classes {
            return Err(Error::ClassIndex {
                index: index.num_classes(),
                classes: self.net.dims.num_classes,
            });
        }
        let train = index.samples(Split::Train);
        let mut report = self.train_samples(&train, observer)?;
        if !report.interrupted && index.validation_images > 0 {
            report.validation = Some(self.evaluate(&index.samples(Split::Validation))?);
        }
        Ok(report)
    }

    /// The epoch/batch loop over an explicit sample list.
    pub fn train_samples(
        &mut self,
        samples: &[Sample],
        observer: &mut dyn TrainObserver,
    ) -> Result<TrainReport> {
        let batch_size = self.cfg.batch_size;
        let batches_in_epoch = samples.len().div_ceil(batch_size);
        let mut report = TrainReport {
            batches: Vec::new(),
            final_train_accuracy: None,
            final_loss: None,
            validation: None,
            images_processed: 0,
            interrupted: false,
            origin: self.origin.describe(),
        };

        'epochs: for epoch in 0..self.cfg.epochs {
            observer.on_epoch_start(epoch + 1, self.cfg.epochs);
            let order = self.epoch_order(samples.len(), epoch);
            let mut stats = EpochStats::default();
            for (b, chunk) in order.chunks(batch_size).enumerate() {
                self.begin_batch();
                for &i in chunk {
                    let sample = &samples[i];
                    load_image(&sample.path, &self.plan, &mut self.acts.input)?;
                    let out = self.accumulate_loaded(sample.class)?;
                    stats.loss_sum += out.loss as f64;
                    stats.correct += usize::from(out.predicted == sample.class);
                    stats.seen += 1;
                    report.images_processed += 1;
                    if report
                        .images_processed
                        .is_multiple_of(INTERRUPT_POLL_INTERVAL)
                        && observer.poll_interrupt()
                    {
                        // partial batch is dropped
                        self.grads.acc.fill(0.0);
                        report.interrupted = true;
                        break 'epochs;
                    }
                }
                self.finish_batch(chunk.len())?;
                let record = BatchRecord {
                    epoch: epoch + 1,
                    batch: b + 1,
                    batches_in_epoch,
                    loss: stats.mean_loss(),
                    accuracy: stats.accuracy(),
                    images_in_batch: chunk.len(),
                    global_step: self.adam.global_step,
                };
                observer.on_batch(&record);
                report.batches.push(record);
            }
            report.final_train_accuracy = Some(stats.accuracy());
            report.final_loss = Some(stats.mean_loss());
        }
        Ok(report)
    }

    /// Forward-only top-1 evaluation with the current weights.
    pub fn evaluate(&self, samples: &[Sample]) -> Result<EvalResult> {
        evaluate(&self.net, &self.plan, &self.weights, samples)
    }
}

/// Forward-only top-1 evaluation. Images are processed in parallel when
/// the network's strategy allows; results are gathered in sample order.
pub fn evaluate(
    net: &Net,
    plan: &ResizePlan,
    weights: &ParamSet,
    samples: &[Sample],
) -> Result<EvalResult> {
    let classes = net.dims.num_classes;
    let inner = net.with_exec(Exec::Sequential);
    let predictions = net
        .exec
        .try_map_range(samples.len(), |i| -> Result<usize> {
            let mut acts = inner.activations();
            load_image(&samples[i].path, plan, &mut acts.input)?;
            let probs = inner.forward_loaded(weights, &mut acts)?;
            Ok(argmax(probs))
        })?;
    let mut confusion = vec![vec![0usize; classes]; classes];
    let mut correct = 0;
    for (s, &p) in samples.iter().zip(&predictions) {
        if s.class >= classes {
            return Err(Error::ClassIndex {
                index: s.class,
                classes,
            });
        }
        confusion[s.class][p] += 1;
        correct += usize::from(s.class == p);
    }
    Ok(EvalResult {
        total: samples.len(),
        correct,
        confusion,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ClassMap, NetConfig, SettingsBuilder};
    use crate::dataset::SynthSpec;
    use crate::weightstore::he_init;

    fn small_settings() -> Settings {
        let mut b = SettingsBuilder::new();
        b.set("input_size", "16").unwrap();
        b.build().unwrap()
    }

    fn synth(root: &std::path::Path, per_class: usize) {
        let mut spec = SynthSpec::new(3);
        spec.side = 32;
        spec.per_class = per_class;
        spec.write(root, &ClassMap::default()).unwrap();
    }

    struct Counter {
        polls: Vec<u64>,
        images: u64,
        stop_at: Option<u64>,
    }

    impl TrainObserver for Counter {
        fn poll_interrupt(&mut self) -> bool {
            self.images += 3;
            self.polls.push(self.images);
            self.stop_at == Some(self.images)
        }
    }

    #[test]
    fn poll_schedule_and_batch_count() {
        let dir = tempfile::tempdir().unwrap();
        synth(dir.path(), 5);
        let mut s = small_settings();
        s.train.epochs = 2;
        s.train.validation_images = 1;
        let idx = DatasetIndex::scan(dir.path(), &s.classes, 1).unwrap();
        let d = s.net.derive().unwrap();
        let mut t = Trainer::new(&s, he_init(&d, 1), WeightOrigin::FromHeInit { seed: 1 }).unwrap();
        let mut obs = Counter {
            polls: vec![],
            images: 0,
            stop_at: None,
        };
        let r = t.train(&idx, &mut obs).unwrap();
        // 12 train images, batch 6
        assert_eq!(r.batches.len(), 4);
        assert_eq!(r.images_processed, 24);
        assert_eq!(obs.polls, (1..=8).map(|k| 3 * k).collect::<Vec<_>>());
        assert_eq!(t.grads.batch_zeroings(), 4);
        assert_eq!(t.grads.image_zeroings(), 24);
        assert_eq!(t.adam.global_step, 4);
        assert_eq!(r.validation.as_ref().unwrap().total, 3);
        assert!(r
            .batches
            .iter()
            .all(|b| (0.0..=100.0).contains(&b.accuracy)));
    }

    #[test]
    fn interrupt_discards_partial_batch() {
        let dir = tempfile::tempdir().unwrap();
        synth(dir.path(), 4);
        let mut s = small_settings();
        s.train.validation_images = 0;
        s.train.batch_size = 4;
        let idx = DatasetIndex::scan(dir.path(), &s.classes, 0).unwrap();
        let d = s.net.derive().unwrap();
        let fresh =
            || Trainer::new(&s, he_init(&d, 2), WeightOrigin::FromHeInit { seed: 2 }).unwrap();

        // stop at image 9: batches 1 and 2 (images 1-8) are complete
        let mut t = fresh();
        let mut obs = Counter {
            polls: vec![],
            images: 0,
            stop_at: Some(9),
        };
        let r = t.train(&idx, &mut obs).unwrap();
        assert!(r.interrupted);
        assert_eq!(r.batches.len(), 2);
        assert!(r.validation.is_none());

        let mut reference = fresh();
        reference.cfg.epochs = 1;
        let samples = idx.samples(Split::Train);
        let order = reference.epoch_order(samples.len(), 0);
        let two: Vec<Sample> = order[..8].iter().map(|&i| samples[i].clone()).collect();
        reference.cfg.shuffle_enabled = false;
        reference.train_samples(&two, &mut ()).unwrap();
        assert_eq!(t.weights, reference.weights);
    }

    #[test]
    fn zero_weights_evaluate_to_class_zero() {
        let dir = tempfile::tempdir().unwrap();
        synth(dir.path(), 2);
        let s = small_settings();
        let idx = DatasetIndex::scan(dir.path(), &s.classes, 0).unwrap();
        let d = NetConfig::with_input_size(16).derive().unwrap();
        let t = Trainer::new(
            &s,
            ParamSet::zeros(&d),
            WeightOrigin::FromHeInit { seed: 0 },
        )
        .unwrap();
        let r = t.evaluate(&idx.samples(Split::All)).unwrap();
        assert_eq!(r.total, 6);
        assert_eq!(r.correct, 2);
        assert!((r.accuracy().unwrap() - 100.0 / 3.0).abs() < 1e-9);
        assert_eq!(r.confusion[1][0], 2);
        assert_eq!(t.evaluate(&[]).unwrap().accuracy(), None);
    }

    #[test]
    fn log_line_format() {
        let r = BatchRecord {
            epoch: 1,
            batch: 5,
            batches_in_epoch: 32,
            loss: 0.72151,
            accuracy: 66.66667,
            images_in_batch: 6,
            global_step: 5,
        };
        assert_eq!(r.log_line(), "Batch 5/32 - Loss: 0.7215 - Acc: 66.7%");
    }
}
