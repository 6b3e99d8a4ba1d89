//! Training loop, checkpoints, evaluation and score export.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::classifier::{bag_loss_var, k_rule, topk_mean_var, ScoreSeries};
use crate::data::{Manifest, Split, VideoFeatureBag};
use crate::error::{Error, Result};
use crate::metrics::{compute_metrics, Metrics};
use crate::model::{Model, ModelConfig};
use crate::optim::{cosine_lr, Adam};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub lr_floor: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Feature widths are taken from the training data.
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 5e-4,
            lr_floor: 1e-6,
            batch_size: 128,
            epochs: 50,
            seed: 0,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "epochs and batch size must be at least 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0) || !(self.lr_floor >= 0.0) {
            return Err(Error::Config(format!(
                "invalid learning rate {} / floor {}",
                self.learning_rate, self.lr_floor
            )));
        }
        if !(0.0..1.0).contains(&self.model.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.model.dropout
            )));
        }
        self.model.cfa().validate()?;
        self.model.hlgatt().validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub eval_ap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub model: Model,
    pub config: TrainConfig,
    /// Number of completed epochs.
    pub epoch: usize,
    pub rng: ChaCha8Rng,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)?;
        fs::write(path, json).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        let mut fresh = Model::init(ckpt.model.config.clone(), 0)?;
        fresh.store.load_values(&ckpt.model.store)?;
        Ok(Checkpoint {
            model: Model {
                store: fresh.store,
                ..ckpt.model
            },
            ..ckpt
        })
    }
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochRecord>,
}

fn check_training_set(bags: &[VideoFeatureBag]) -> Result<(usize, usize)> {
    let first = bags
        .first()
        .ok_or_else(|| Error::Contract("no training bags".into()))?;
    if !bags.iter().any(|b| b.label) || !bags.iter().any(|b| !b.label) {
        return Err(Error::Contract(
            "training needs at least one normal and one abnormal bag".into(),
        ));
    }
    Ok((first.visual.cols(), first.audio.cols()))
}

/// Forward, loss and backward for one bag; the loss is scaled by `weight`
/// before differentiation. Returns the unscaled loss.
fn bag_step(
    model: &mut Model,
    bag: &VideoFeatureBag,
    weight: f64,
    dropout_seed: u64,
    epoch: usize,
) -> Result<f64> {
    let mut tape = Tape::training(ChaCha8Rng::seed_from_u64(dropout_seed));
    let b = model.store.bind(&mut tape);
    let v = tape.constant(bag.visual.clone());
    let a = tape.constant(bag.audio.clone());
    let scores = model.forward(&mut tape, &b, v, a)?;
    let bag_score = topk_mean_var(&mut tape, scores, k_rule(bag.len()))?;
    let loss = bag_loss_var(&mut tape, bag_score, bag.label)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss {
            epoch,
            bag: bag.id.clone(),
            tensor: tape.first_non_finite().unwrap_or_else(|| "loss".into()),
        });
    }
    let scaled = tape.scale(loss, weight)?;
    let mut grads = tape.backward(scaled)?;
    model.store.accumulate_grads(&b, &mut grads)?;
    Ok(value)
}

/// Trains a fresh model. When `eval_bags` is given, frame AP on them is
/// logged after every epoch.
pub fn train(
    train_bags: &[VideoFeatureBag],
    eval_bags: Option<&[VideoFeatureBag]>,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    let (dv, da) = check_training_set(train_bags)?;
    let mut config = config.clone();
    config.model.d_visual = dv;
    config.model.d_audio = da;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = Model::init(config.model.clone(), rng.random())?;
    for bag in train_bags {
        model.check_bag(bag)?;
    }
    let mut adam = Adam::new(&model.store);
    let mut order: Vec<usize> = (0..train_bags.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let lr = cosine_lr(config.learning_rate, config.lr_floor, epoch, config.epochs);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            model.store.zero_grad();
            let weight = 1.0 / batch.len() as f64;
            for &i in batch {
                total += bag_step(&mut model, &train_bags[i], weight, rng.random(), epoch)?;
            }
            adam.step(&mut model.store, lr)?;
        }
        let eval_ap = match eval_bags {
            Some(bags) => Some(evaluate(&model, bags)?.metrics.ap),
            None => None,
        };
        log.push(EpochRecord {
            epoch,
            loss: total / train_bags.len() as f64,
            lr,
            eval_ap,
        });
    }
    model.store.zero_grad();
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            model,
            config,
            epoch: log.len(),
            rng,
        },
        log,
    })
}

/// Trains on the manifest's train split, logging AP on its test split when
/// every test bag carries frame truth.
pub fn train_manifest(manifest: &Manifest, config: &TrainConfig) -> Result<TrainOutcome> {
    let train_bags = manifest.load_split(Split::Train)?;
    let test_bags = manifest.load_split(Split::Test)?;
    let has_eval = !test_bags.is_empty()
        && test_bags.iter().all(|b| b.frame_truth.is_some())
        && test_bags
            .iter()
            .any(|b| b.frame_truth.as_ref().is_some_and(|t| t.contains(&1)));
    train(&train_bags, has_eval.then_some(&test_bags[..]), config)
}

pub fn write_epoch_log(log: &[EpochRecord], path: &Path) -> Result<()> {
    let mut out = String::from("epoch,loss,lr,eval_ap\n");
    for r in log {
        let ap = r.eval_ap.map(|a| a.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{}", r.epoch, r.loss, r.lr, ap);
    }
    fs::write(path, out).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub struct Evaluation {
    pub metrics: Metrics,
    pub series: Vec<(String, ScoreSeries)>,
}

/// Frame-level metrics over all bags, each snippet score repeated over its
/// 16 frames.
pub fn evaluate(model: &Model, bags: &[VideoFeatureBag]) -> Result<Evaluation> {
    let mut scores = Vec::new();
    let mut truth = Vec::new();
    let mut series = Vec::with_capacity(bags.len());
    for bag in bags {
        let t = bag
            .frame_truth
            .as_ref()
            .ok_or_else(|| Error::Evaluation(format!("bag {} has no frame truth", bag.id)))?;
        let s = model.score(bag)?;
        scores.extend(s.frame_scores());
        truth.extend_from_slice(t);
        series.push((bag.id.clone(), s));
    }
    Ok(Evaluation {
        metrics: compute_metrics(&scores, &truth)?,
        series,
    })
}

pub fn evaluate_manifest(model: &Model, manifest: &Manifest) -> Result<Evaluation> {
    evaluate(model, &manifest.load_split(Split::Test)?)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameRow {
    pub frame: usize,
    pub score: f64,
    pub truth: Option<u8>,
}

pub fn score_curve(series: &ScoreSeries, truth: Option<&[u8]>) -> Vec<FrameRow> {
    series
        .frame_scores()
        .into_iter()
        .enumerate()
        .map(|(frame, score)| FrameRow {
            frame,
            score,
            truth: truth.map(|t| t[frame]),
        })
        .collect()
}

/// Per-frame scores of one bag, with its truth when present.
pub fn export_score_curve(model: &Model, bag: &VideoFeatureBag) -> Result<Vec<FrameRow>> {
    Ok(score_curve(&model.score(bag)?, bag.frame_truth.as_deref()))
}

pub fn write_score_curve(rows: &[FrameRow], path: &Path) -> Result<()> {
    let mut out = String::from("frame,score,truth\n");
    for r in rows {
        let truth = r.truth.map(|t| t.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{}", r.frame, r.score, truth);
    }
    fs::write(path, out).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Writes `metrics.txt`, `metrics.csv` and one `scores/<id>.csv` per bag.
pub fn write_evaluation(
    evaluation: &Evaluation,
    bags: &[VideoFeatureBag],
    out_dir: &Path,
) -> Result<()> {
    let scores_dir = out_dir.join("scores");
    fs::create_dir_all(&scores_dir)
        .map_err(|e| Error::io(format!("creating {}", scores_dir.display()), e))?;
    let m = &evaluation.metrics;
    let text = format!(
        "ap={}\naccuracy={}\nprecision={}\nrecall={}\n",
        m.ap, m.accuracy, m.precision, m.recall
    );
    let csv = format!(
        "ap,accuracy,precision,recall\n{},{},{},{}\n",
        m.ap, m.accuracy, m.precision, m.recall
    );
    for (name, body) in [("metrics.txt", text), ("metrics.csv", csv)] {
        let path = out_dir.join(name);
        fs::write(&path, body).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    }
    for ((id, series), bag) in evaluation.series.iter().zip(bags) {
        let rows = score_curve(series, bag.frame_truth.as_deref());
        write_score_curve(&rows, &scores_dir.join(format!("{id}.csv")))?;
    }
    Ok(())
}
