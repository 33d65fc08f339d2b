use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{checkpoint_name, save_checkpoint, Checkpoint};
use super::{advance_stage, sample_patch, warmup_lr, Adam, CurriculumStage, ParamGroup, Patch, TrainConfig};
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::losses::{total_loss_backward, LossReport};
use crate::model::{CandidateSet, Grads, Model};

/// Position of the loop, saved with every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub stage: CurriculumStage,
    /// Completed epochs of the current stage.
    pub epoch_in_stage: usize,
    pub step_in_stage: usize,
    pub global_step: u64,
    /// Mean total loss of each completed epoch of the current stage.
    pub history: Vec<f64>,
    pub finished: bool,
}

impl Default for TrainState {
    fn default() -> Self {
        TrainState {
            stage: CurriculumStage::FIRST,
            epoch_in_stage: 0,
            step_in_stage: 0,
            global_step: 0,
            history: Vec::new(),
            finished: false,
        }
    }
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub stage: u8,
    pub epoch: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: u8,
    pub epoch: usize,
    pub mean_total: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs: Vec<EpochRecord>,
    pub steps: u64,
    pub checkpoints: Vec<PathBuf>,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub optim: Adam,
    pub state: TrainState,
    patch_size: f64,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.model.clone(), config.seed)?;
        let optim = Adam::new(&model.store, config.weight_decay);
        Ok(Trainer {
            patch_size: config.patch_size()?,
            config,
            model,
            optim,
            state: TrainState::default(),
        })
    }

    pub fn from_checkpoint(c: Checkpoint) -> Result<Self> {
        Ok(Trainer {
            patch_size: c.config.patch_size()?,
            config: c.config,
            model: c.model,
            optim: c.optim,
            state: c.state,
        })
    }

    pub fn patch_size(&self) -> f64 {
        self.patch_size
    }

    /// The patches of the next step; a pure function of the seed and the
    /// step counter, so a resumed run sees the same batches. Intensity is
    /// dropped when the model does not use it.
    pub fn next_batch(&self, scene: &PointCloud) -> Result<Vec<Patch>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(self.state.global_step);
        (0..self.config.batch_size)
            .map(|_| {
                let mut p = sample_patch(scene, self.patch_size, self.config.max_points_per_patch, &mut rng)?;
                p.cloud = self.model.prepare_input(p.cloud)?;
                Ok(p)
            })
            .collect()
    }

    /// Loss report and parameter gradients of a batch.
    pub fn loss_and_grads(&self, batch: &[PointCloud]) -> Result<(LossReport, Grads)> {
        let fwd = batch.iter().map(|x| self.model.forward(x)).collect::<Result<Vec<_>>>()?;
        let cands: Vec<CandidateSet> = fwd.iter().map(|(c, _)| c.clone()).collect();
        let (report, cg) = total_loss_backward(&cands, batch, &self.config.loss)?;
        let mut grads = self.model.store.zero_grads();
        for ((c, cache), g) in fwd.iter().zip(&cg) {
            self.model.backward(c, cache, g, &mut grads);
        }
        let stage = self.state.stage;
        for (id, p) in self.model.store.iter() {
            if !stage.unlocks(ParamGroup::of(&p.name)) {
                grads.zero(id);
            }
        }
        Ok((report, grads))
    }

    pub fn current_lr(&self) -> f64 {
        warmup_lr(self.state.step_in_stage, self.config.base_lr, self.config.warmup_batches)
    }

    /// One optimisation step on an explicit batch.
    pub fn step_on(&mut self, batch: &[PointCloud]) -> Result<StepRecord> {
        let (report, grads) = self.loss_and_grads(batch)?;
        if !report.is_finite() || !grads.is_finite() {
            return Err(Error::NonFinite {
                step: self.state.global_step,
                detail: format!("{report:?}"),
            });
        }
        let lr = self.current_lr();
        let stage = self.state.stage;
        self.optim.step(
            &mut self.model.store,
            &grads,
            lr,
            |name| stage.unlocks(ParamGroup::of(name)),
            ParamGroup::decays,
        );
        let record = StepRecord {
            step: self.state.global_step,
            stage: stage.index(),
            epoch: self.state.epoch_in_stage + 1,
            lr,
            loss: report,
        };
        self.state.global_step += 1;
        self.state.step_in_stage += 1;
        Ok(record)
    }

    /// Next stage after `stage`, skipping the intensity stage when the loss
    /// space has no intensity.
    fn following_stage(&self, stage: CurriculumStage) -> Option<CurriculumStage> {
        let mut next = stage.next()?;
        if !self.config.model.use_intensity && next.unlocks(ParamGroup::Intensity) && !next.unlocks(ParamGroup::Scales) {
            next = next.next()?;
        }
        (next.index() <= self.config.last_stage).then_some(next)
    }

    /// Trains until the last stage converges. With `out`, every step is
    /// appended to `out/metrics.jsonl` and a checkpoint is written after
    /// every epoch.
    pub fn train(&mut self, scene: &PointCloud, out: Option<&Path>) -> Result<TrainSummary> {
        let mut summary = TrainSummary::default();
        let mut metrics = match out {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                Some(OpenOptions::new().create(true).append(true).open(dir.join("metrics.jsonl"))?)
            }
            None => None,
        };
        self.model.stage = self.state.stage;
        while !self.state.finished {
            let mut total = 0.0;
            for _ in 0..self.config.batches_per_epoch {
                let batch = self.next_batch(scene)?;
                let clouds: Vec<PointCloud> = batch.iter().map(|p| p.cloud.clone()).collect();
                let record = match self.step_on(&clouds) {
                    Ok(r) => r,
                    Err(e @ Error::NonFinite { .. }) => {
                        if let Some(dir) = out {
                            dump_batch(dir, self.state.global_step, &batch)?;
                        }
                        return Err(e);
                    }
                    Err(e) => return Err(e),
                };
                total += record.loss.total;
                if let Some(f) = metrics.as_mut() {
                    writeln!(f, "{}", serde_json::to_string(&record).expect("metrics serialise"))?;
                }
            }
            let mean = total / self.config.batches_per_epoch as f64;
            self.state.epoch_in_stage += 1;
            self.state.history.push(mean);
            let stage = self.state.stage;
            log::info!("stage {stage} epoch {}: mean loss {mean:.6}", self.state.epoch_in_stage);
            summary.epochs.push(EpochRecord {
                stage: stage.index(),
                epoch: self.state.epoch_in_stage,
                mean_total: mean,
            });
            let epoch = self.state.epoch_in_stage;
            if advance_stage(&self.state.history, &self.config.convergence) {
                match self.following_stage(stage) {
                    Some(next) => {
                        self.state.stage = next;
                        self.state.epoch_in_stage = 0;
                        self.state.step_in_stage = 0;
                        self.state.history.clear();
                        self.model.stage = next;
                    }
                    None => self.state.finished = true,
                }
            }
            if let Some(dir) = out {
                let path = dir.join(checkpoint_name(stage.index(), epoch));
                save_checkpoint(&path, &self.config, &self.state, &self.model, &self.optim)?;
                summary.checkpoints.push(path);
            }
        }
        summary.steps = self.state.global_step;
        Ok(summary)
    }
}

fn dump_batch(dir: &Path, step: u64, batch: &[Patch]) -> Result<()> {
    #[derive(Serialize)]
    struct Dumped<'a> {
        frame: &'a super::PatchFrame,
        scene_indices: &'a [usize],
        positions: &'a [[f64; 3]],
        intensity: Option<&'a [f64]>,
    }
    let dumped: Vec<Dumped> = batch
        .iter()
        .map(|p| Dumped {
            frame: &p.frame,
            scene_indices: &p.indices,
            positions: &p.cloud.positions,
            intensity: p.cloud.intensity.as_deref(),
        })
        .collect();
    let text = serde_json::to_string(&dumped).expect("batch serialises");
    crate::io::write_atomic(&dir.join(format!("nonfinite_batch_step{step}.json")), text.as_bytes())
}
