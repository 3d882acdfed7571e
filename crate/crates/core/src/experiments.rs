//! Toy and synthetic-scene benchmark runners shared by the CLI and the test suites.

use serde::{Deserialize, Serialize};

use crate::data::{
    gen_negative_patches, gen_scenes, gen_toy2d, AugmentConfig, MixedSource, SceneConfig, SceneSample, ToyPointSet,
    ToyRole, ToySource,
};
use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::math::{
    class_posterior, discriminative_score, generative_score, hybrid_score, unnormalized_log_likelihood, AnomalyScoreMap,
};
use crate::metrics::{
    auroc, average_precision, closed_miou, fpr_at_tpr, FoldImage, OpenConfusionMatrix, ScoredPixelSet,
    DEFAULT_TARGET_TPR,
};
use crate::nn::{
    forward, train, EpochLog, ModelParams, NetworkConfig, NetworkOutputs, SampleSource, TrainConfig, TrainProgress,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreVariant {
    Hybrid,
    Generative,
    Discriminative,
}

impl ScoreVariant {
    pub const ALL: [ScoreVariant; 3] = [
        ScoreVariant::Hybrid,
        ScoreVariant::Generative,
        ScoreVariant::Discriminative,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScoreVariant::Hybrid => "hybrid",
            ScoreVariant::Generative => "generative",
            ScoreVariant::Discriminative => "discriminative",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        ScoreVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown score variant {s:?}")))
    }
}

/// The three anomaly maps of one image, in [`ScoreVariant::ALL`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMaps {
    pub hybrid: AnomalyScoreMap,
    pub generative: AnomalyScoreMap,
    pub discriminative: AnomalyScoreMap,
}

impl ScoreMaps {
    pub fn get(&self, v: ScoreVariant) -> &AnomalyScoreMap {
        match v {
            ScoreVariant::Hybrid => &self.hybrid,
            ScoreVariant::Generative => &self.generative,
            ScoreVariant::Discriminative => &self.discriminative,
        }
    }
}

pub fn score_maps(out: &NetworkOutputs) -> Result<ScoreMaps> {
    let log_px = unnormalized_log_likelihood(&out.logits);
    Ok(ScoreMaps {
        hybrid: hybrid_score(&out.posterior, &log_px)?,
        generative: generative_score(&log_px)?,
        discriminative: discriminative_score(&out.posterior)?,
    })
}

fn single_output(params: &ModelParams, sample: &SceneSample) -> Result<NetworkOutputs> {
    forward(params, &sample.image.to_tensor())?
        .pop()
        .ok_or_else(|| Error::contract("forward returned no outputs"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyBenchConfig {
    pub n_per_role: usize,
    pub widths: Vec<usize>,
    /// Points per training strip.
    pub chunk: usize,
    pub train: TrainConfig,
}

impl Default for ToyBenchConfig {
    fn default() -> Self {
        ToyBenchConfig {
            n_per_role: 400,
            widths: vec![32, 32],
            chunk: 100,
            train: TrainConfig {
                epochs: 300,
                batch_size: 4,
                lr_start: 1e-2,
                lr_end: 1e-4,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ToyVariantMetrics {
    pub variant: ScoreVariant,
    /// Anomalies against inliers.
    pub auroc: f64,
    pub ap: f64,
    /// Anomalies in the sector never covered by negatives, against inliers.
    pub auroc_unseen: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToySeedResult {
    pub seed: u64,
    pub metrics: Vec<ToyVariantMetrics>,
    pub test: ToyPointSet,
    /// Per test point, in [`ScoreVariant::ALL`] order.
    pub scores: Vec<[f64; 3]>,
    pub log: Vec<EpochLog>,
}

/// Trains the toy model for one seed and scores the test points.
pub fn run_toy_seed(seed: u64, cfg: &ToyBenchConfig) -> Result<ToySeedResult> {
    let (train_set, test) = gen_toy2d(seed, cfg.n_per_role)?;
    let mut params = ModelParams::init(NetworkConfig {
        input_channels: 2,
        widths: cfg.widths.clone(),
        num_classes: 2,
        kernel_size: 1,
        seed,
    })?;
    let source = ToySource::new(&train_set, cfg.chunk, seed)?;
    let tcfg = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let mut progress = TrainProgress::new(&params, &tcfg, source.len());
    let log = train(&mut params, &mut progress, &source, &tcfg, |_, _, _| Ok(()))?;

    let out = single_output(&params, &test.to_sample(&test.points)?)?;
    let maps = score_maps(&out)?;
    let scores: Vec<[f64; 3]> = (0..test.len())
        .map(|i| ScoreVariant::ALL.map(|v| maps.get(v).values()[i]))
        .collect();

    let anomaly: Vec<bool> = test.points.iter().map(|p| p.role == ToyRole::Anomaly).collect();
    let unseen_keep: Vec<bool> = test
        .points
        .iter()
        .map(|p| p.role != ToyRole::Anomaly || p.in_unseen_sector())
        .collect();
    let metrics = ScoreVariant::ALL
        .iter()
        .enumerate()
        .map(|(j, &variant)| {
            let all = ScoredPixelSet::new(scores.iter().map(|s| s[j]).collect(), anomaly.clone())?;
            let (us, ut): (Vec<f64>, Vec<bool>) = scores
                .iter()
                .zip(&anomaly)
                .zip(&unseen_keep)
                .filter(|(_, &keep)| keep)
                .map(|((s, &a), _)| (s[j], a))
                .unzip();
            Ok(ToyVariantMetrics {
                variant,
                auroc: auroc(&all)?,
                ap: average_precision(&all)?,
                auroc_unseen: auroc(&ScoredPixelSet::new(us, ut)?)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ToySeedResult {
        seed,
        metrics,
        test,
        scores,
        log,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneBenchConfig {
    pub scenes: SceneConfig,
    pub augment: AugmentConfig,
    pub widths: Vec<usize>,
    pub kernel_size: usize,
    pub train: TrainConfig,
}

impl Default for SceneBenchConfig {
    fn default() -> Self {
        SceneBenchConfig {
            scenes: SceneConfig::default(),
            augment: AugmentConfig {
                crop_size: 32,
                ..AugmentConfig::default()
            },
            widths: vec![16, 16, 16],
            kernel_size: 3,
            train: TrainConfig::default(),
        }
    }
}

impl SceneBenchConfig {
    pub fn network(&self, seed: u64) -> NetworkConfig {
        NetworkConfig {
            input_channels: 3,
            widths: self.widths.clone(),
            num_classes: crate::data::scene::SCENE_CLASSES,
            kernel_size: self.kernel_size,
            seed,
        }
    }
}

/// Trains a scene model with the given `beta` on mixed-content crops.
pub fn train_scene_model(
    seed: u64,
    cfg: &SceneBenchConfig,
    beta: f64,
    scenes: &[SceneSample],
) -> Result<(ModelParams, Vec<EpochLog>)> {
    let negatives = gen_negative_patches(seed, &cfg.scenes)?;
    let source = MixedSource::new(
        scenes,
        &negatives,
        AugmentConfig {
            seed,
            ..cfg.augment.clone()
        },
    )?;
    let tcfg = TrainConfig {
        seed,
        beta,
        ..cfg.train.clone()
    };
    let mut params = ModelParams::init(cfg.network(seed))?;
    let mut progress = TrainProgress::new(&params, &tcfg, scenes.len());
    let log = train(&mut params, &mut progress, &source, &tcfg, |_, _, _| Ok(()))?;
    Ok((params, log))
}

#[derive(Clone, Debug, PartialEq)]
pub struct VariantScores {
    pub variant: ScoreVariant,
    pub ap: f64,
    pub fpr95: f64,
    pub auroc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneEval {
    pub variants: Vec<VariantScores>,
    pub closed_miou: f64,
    /// Per image and variant, ready for fold evaluation.
    pub folds: Vec<[FoldImage; 3]>,
}

impl SceneEval {
    pub fn get(&self, v: ScoreVariant) -> &VariantScores {
        self.variants
            .iter()
            .find(|s| s.variant == v)
            .expect("all variants evaluated")
    }
}

/// Pools the pixels of all `scenes` and scores each variant; closed mIoU covers inlier pixels.
pub fn evaluate_scene_model(params: &ModelParams, scenes: &[SceneSample]) -> Result<SceneEval> {
    if scenes.is_empty() {
        return Err(Error::contract("no scenes to evaluate"));
    }
    let k = params.config().num_classes;
    let mut cm = OpenConfusionMatrix::new(k);
    let mut pooled: [Vec<ScoredPixelSet>; 3] = Default::default();
    let mut folds = Vec::with_capacity(scenes.len());
    for s in scenes {
        let out = single_output(params, s)?;
        let closed = LabelMap::new(s.height(), s.width(), k, class_posterior(&out.logits).argmax())?;
        cm.add(&closed, &s.labels)?;
        let maps = score_maps(&out)?;
        for (j, v) in ScoreVariant::ALL.iter().enumerate() {
            pooled[j].push(ScoredPixelSet::from_map(maps.get(*v), &s.labels)?);
        }
        folds.push(ScoreVariant::ALL.map(|v| FoldImage {
            closed: closed.clone(),
            scores: maps.get(v).clone(),
            gt: s.labels.clone(),
        }));
    }
    let variants = ScoreVariant::ALL
        .iter()
        .zip(&pooled)
        .map(|(&variant, parts)| {
            let set = ScoredPixelSet::concat(parts)?;
            Ok(VariantScores {
                variant,
                ap: average_precision(&set)?,
                fpr95: fpr_at_tpr(&set, DEFAULT_TARGET_TPR)?.fpr,
                auroc: auroc(&set)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SceneEval {
        variants,
        closed_miou: closed_miou(&cm)?.mean,
        folds,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSeedResult {
    pub seed: u64,
    pub beta: f64,
    pub eval: SceneEval,
    pub log: Vec<EpochLog>,
}

/// Generates the benchmark for `seed`, trains with `beta` and evaluates on the test split.
pub fn run_scene_seed(seed: u64, cfg: &SceneBenchConfig, beta: f64) -> Result<SceneSeedResult> {
    let splits = gen_scenes(seed, &cfg.scenes)?;
    let (params, log) = train_scene_model(seed, cfg, beta, &splits.train)?;
    Ok(SceneSeedResult {
        seed,
        beta,
        eval: evaluate_scene_model(&params, &splits.test)?,
        log,
    })
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
