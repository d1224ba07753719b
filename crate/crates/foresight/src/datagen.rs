//! Synthetic activity-grammar datasets.
//!
//! Activities come from an order-1 Markov chain whose transition row can be
//! reweighted by the object visible in the scene, so the scene carries real
//! information about the future: a bowl in the scene makes bowl-bound
//! successors more likely. Activity features are class-anchored Gaussians and
//! scene features are object-anchored Gaussians, standing in for visual
//! features; durations and gaps are label-dependent, and every instance
//! carries a templated reference caption for its (class, object) pair.
//!
//! Keeping the chain order-1 makes the Bayes-optimal prediction accuracy
//! computable in closed form, so trained models have a known target.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{ActivityInstance, VideoRecord};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GrammarError {
    #[error("invalid grammar: {0}")]
    Invalid(String),
    #[error("train fraction must lie in (0, 1), got {0}")]
    BadFraction(f64),
    #[error("split of {n} videos at {frac} leaves an empty side")]
    DegenerateSplit { n: usize, frac: f64 },
}

/// Whether the disambiguating object persists for a whole video or is
/// redrawn per activity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectMode {
    PerVideo,
    PerInstance,
}

/// Multiplicative reweighting of one transition row when `object` is in the
/// scene during an activity of class `class`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModulationRule {
    pub class: usize,
    pub object: usize,
    pub factors: Vec<f64>,
}

/// Caption template for a (class, object) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateRule {
    pub class: usize,
    pub object: usize,
    pub tokens: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivityGrammar {
    pub name: String,
    pub classes: Vec<String>,
    pub objects: Vec<String>,
    /// Row-stochastic class transition matrix.
    pub transition: Vec<Vec<f64>>,
    pub modulation: Vec<ModulationRule>,
    /// Candidate scene objects per class.
    pub object_choices: Vec<Vec<usize>>,
    pub object_mode: ObjectMode,
    pub duration_mean: Vec<f64>,
    pub duration_std: Vec<f64>,
    pub gap_mean: Vec<f64>,
    pub gap_std: Vec<f64>,
    pub templates: Vec<TemplateRule>,
}

impl ActivityGrammar {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn validate(&self) -> Result<(), GrammarError> {
        let c = self.classes.len();
        if c < 2 {
            return Err(GrammarError::Invalid("needs at least two classes".into()));
        }
        if self.objects.is_empty() {
            return Err(GrammarError::Invalid("needs at least one object".into()));
        }
        if self.transition.len() != c {
            return Err(GrammarError::Invalid("transition matrix is not c x c".into()));
        }
        for (i, row) in self.transition.iter().enumerate() {
            if row.len() != c {
                return Err(GrammarError::Invalid(format!("transition row {i} length")));
            }
            if row.iter().any(|&p| p < 0.0) {
                return Err(GrammarError::Invalid(format!(
                    "transition row {i} has negative mass"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(GrammarError::Invalid(format!(
                    "transition row {i} sums to {sum}, not 1"
                )));
            }
        }
        for rule in &self.modulation {
            if rule.class >= c || rule.object >= self.objects.len() {
                return Err(GrammarError::Invalid("modulation rule out of range".into()));
            }
            if rule.factors.len() != c || rule.factors.iter().any(|&f| f < 0.0) {
                return Err(GrammarError::Invalid("modulation factors malformed".into()));
            }
        }
        if self.object_choices.len() != c
            || self.object_choices.iter().any(|ch| ch.is_empty())
            || self
                .object_choices
                .iter()
                .flatten()
                .any(|&o| o >= self.objects.len())
        {
            return Err(GrammarError::Invalid("object choices malformed".into()));
        }
        if self.object_mode == ObjectMode::PerVideo {
            for ch in &self.object_choices[1..] {
                if ch != &self.object_choices[0] {
                    return Err(GrammarError::Invalid(
                        "per-video objects require one shared choice set".into(),
                    ));
                }
            }
        }
        for v in [
            &self.duration_mean,
            &self.duration_std,
            &self.gap_mean,
            &self.gap_std,
        ] {
            if v.len() != c || v.iter().any(|&x| x < 0.0 || !x.is_finite()) {
                return Err(GrammarError::Invalid("time parameters malformed".into()));
            }
        }
        for k in 0..c {
            for &o in &self.object_choices[k] {
                if !self
                    .templates
                    .iter()
                    .any(|t| t.class == k && t.object == o && !t.tokens.is_empty())
                {
                    return Err(GrammarError::Invalid(format!(
                        "no caption template for class {k} with object {o}"
                    )));
                }
            }
            // Every modulated row must keep some probability mass.
            for &o in &self.object_choices[k] {
                if self.modulated_row(k, o).iter().sum::<f64>() == 0.0 {
                    return Err(GrammarError::Invalid(format!(
                        "modulation zeroes the whole row for class {k}, object {o}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Successor distribution for an activity of `class` with `object` in the
    /// scene: the transition row reweighted and renormalized.
    pub fn modulated_row(&self, class: usize, object: usize) -> Vec<f64> {
        let mut row = self.transition[class].clone();
        if let Some(rule) = self
            .modulation
            .iter()
            .find(|r| r.class == class && r.object == object)
        {
            for (p, f) in row.iter_mut().zip(&rule.factors) {
                *p *= f;
            }
        }
        let sum: f64 = row.iter().sum();
        if sum > 0.0 {
            for p in &mut row {
                *p /= sum;
            }
        }
        row
    }

    pub fn template(&self, class: usize, object: usize) -> Option<&[String]> {
        self.templates
            .iter()
            .find(|t| t.class == class && t.object == object)
            .map(|t| t.tokens.as_slice())
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

/// Seed for a derived stream, so per-video generation is order-independent.
fn derive_seed(base: u64, idx: u64) -> u64 {
    splitmix64(base ^ splitmix64(idx.wrapping_add(1)))
}

fn sample_index(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random_range(0.0..total);
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

fn gaussian_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Sample `n_videos` videos of `len_range` activities each. Features are
/// class/object centroids (drawn once from `seed`) plus `noise_sigma`
/// Gaussian noise. Deterministic in all arguments; each video runs on its own
/// derived seed.
pub fn generate_dataset(
    grammar: &ActivityGrammar,
    n_videos: usize,
    len_range: (usize, usize),
    feature_dim: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<Vec<VideoRecord>, GrammarError> {
    grammar.validate()?;
    let c = grammar.num_classes();
    if feature_dim < c {
        return Err(GrammarError::Invalid(format!(
            "feature_dim {feature_dim} must be at least the class count {c}"
        )));
    }
    if len_range.0 < 1 || len_range.0 > len_range.1 {
        return Err(GrammarError::Invalid(format!(
            "bad length range {len_range:?}"
        )));
    }
    let mut centroid_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, u64::MAX));
    let class_centroids: Vec<Vec<f64>> =
        (0..c).map(|_| gaussian_vec(&mut centroid_rng, feature_dim)).collect();
    let object_centroids: Vec<Vec<f64>> = (0..grammar.objects.len())
        .map(|_| gaussian_vec(&mut centroid_rng, feature_dim))
        .collect();

    let mut videos = Vec::with_capacity(n_videos);
    for v in 0..n_videos {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, v as u64));
        let m = rng.random_range(len_range.0..=len_range.1);
        let video_object = grammar.object_choices[0][rng.random_range(0..grammar.object_choices[0].len())];
        let mut class = rng.random_range(0..c);
        let mut start = 0.0f64;
        let mut activities = Vec::with_capacity(m);
        for _ in 0..m {
            let object = match grammar.object_mode {
                ObjectMode::PerVideo => video_object,
                ObjectMode::PerInstance => {
                    let choices = &grammar.object_choices[class];
                    choices[rng.random_range(0..choices.len())]
                }
            };
            let noise = |rng: &mut ChaCha8Rng, base: &[f64]| -> Vec<f64> {
                base.iter()
                    .map(|&b| b + noise_sigma * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            };
            let duration =
                (grammar.duration_mean[class] + grammar.duration_std[class] * rng.sample::<f64, _>(StandardNormal))
                    .max(0.0);
            let gap = (grammar.gap_mean[class] + grammar.gap_std[class] * rng.sample::<f64, _>(StandardNormal))
                .max(0.0);
            let caption = grammar
                .template(class, object)
                .expect("validated template")
                .to_vec();
            activities.push(ActivityInstance {
                label: class,
                start_s: start,
                end_s: start + duration,
                activity_feature: noise(&mut rng, &class_centroids[class]),
                scene_feature: noise(&mut rng, &object_centroids[object]),
                scene_objects: vec![grammar.objects[object].clone()],
                caption_tokens: caption,
            });
            // Strictly increasing starts even if both samples truncate to 0.
            start += (duration + gap).max(1e-3);
            class = sample_index(&mut rng, &grammar.modulated_row(class, object));
        }
        videos.push(VideoRecord {
            video_id: format!("v{v:05}"),
            activities,
        });
    }
    Ok(videos)
}

const CLASS_NAMES: [&str; 6] = [
    "wash objects",
    "peel",
    "cut slices",
    "put in bowl",
    "stir",
    "serve",
];
const VERBS: [&str; 6] = ["washed", "peeled", "sliced", "filled", "stirred", "served"];

fn standard_templates(classes: usize, objects: &[String]) -> Vec<TemplateRule> {
    let mut out = Vec::new();
    for k in 0..classes {
        for (o, obj) in objects.iter().enumerate() {
            let tokens = vec![
                "the".to_string(),
                "person".to_string(),
                VERBS[k % VERBS.len()].to_string(),
                "the".to_string(),
                obj.clone(),
            ];
            out.push(TemplateRule {
                class: k,
                object: o,
                tokens,
            });
        }
    }
    out
}

fn label_dependent_times(seed: u64, classes: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xD1CE));
    let duration_mean: Vec<f64> = (0..classes)
        .map(|k| 4.0 + 1.5 * k as f64 + rng.random_range(0.0..1.0))
        .collect();
    let duration_std = vec![0.5; classes];
    let gap_mean: Vec<f64> = (0..classes)
        .map(|k| 2.0 + 0.8 * k as f64 + rng.random_range(0.0..0.5))
        .collect();
    let gap_std = vec![0.3; classes];
    (duration_mean, duration_std, gap_mean, gap_std)
}

/// Grammar in which every class has exactly two equiprobable successors and
/// the scene object decides between them deterministically. Without scene
/// context the best possible successor accuracy is 0.5; with it, 1.0.
pub fn make_disambiguation_grammar(seed: u64) -> ActivityGrammar {
    let c = CLASS_NAMES.len();
    let objects = vec!["bowl".to_string(), "pan".to_string()];
    let mut transition = vec![vec![0.0; c]; c];
    let mut modulation = Vec::new();
    for k in 0..c {
        let succ_a = (k + 1) % c;
        let succ_b = (k + 2) % c;
        transition[k][succ_a] = 0.5;
        transition[k][succ_b] = 0.5;
        let mut fa = vec![0.0; c];
        fa[succ_a] = 1.0;
        modulation.push(ModulationRule {
            class: k,
            object: 0,
            factors: fa,
        });
        let mut fb = vec![0.0; c];
        fb[succ_b] = 1.0;
        modulation.push(ModulationRule {
            class: k,
            object: 1,
            factors: fb,
        });
    }
    let (duration_mean, duration_std, gap_mean, gap_std) = label_dependent_times(seed, c);
    ActivityGrammar {
        name: "disambiguation".into(),
        classes: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        templates: standard_templates(c, &objects),
        objects,
        transition,
        modulation,
        object_choices: vec![vec![0, 1]; c],
        object_mode: ObjectMode::PerInstance,
        duration_mean,
        duration_std,
        gap_mean,
        gap_std,
    }
}

/// Disambiguation structure with the scene object held fixed per video, so
/// the object in observed scenes persists into the future captions.
pub fn make_caption_grammar(seed: u64) -> ActivityGrammar {
    let mut g = make_disambiguation_grammar(seed);
    g.name = "caption".into();
    g.object_mode = ObjectMode::PerVideo;
    g
}

/// Stochastic grammar with a dominant successor per class and a mild object
/// modulation; future labels get harder to predict the deeper the horizon.
pub fn make_stochastic_grammar(seed: u64) -> ActivityGrammar {
    let c = CLASS_NAMES.len();
    let objects = vec!["bowl".to_string(), "pan".to_string()];
    let mut transition = vec![vec![0.0; c]; c];
    let mut modulation = Vec::new();
    for k in 0..c {
        let rest = 0.15 / (c - 2) as f64;
        for j in 0..c {
            transition[k][j] = rest;
        }
        transition[k][(k + 1) % c] = 0.65;
        transition[k][(k + 2) % c] = 0.20;
        // Renormalize exactly.
        let sum: f64 = transition[k].iter().sum();
        for p in &mut transition[k] {
            *p /= sum;
        }
        let mut fa = vec![1.0; c];
        fa[(k + 1) % c] = 2.0;
        modulation.push(ModulationRule {
            class: k,
            object: 0,
            factors: fa,
        });
        let mut fb = vec![1.0; c];
        fb[(k + 2) % c] = 2.0;
        modulation.push(ModulationRule {
            class: k,
            object: 1,
            factors: fb,
        });
    }
    let (duration_mean, duration_std, gap_mean, gap_std) = label_dependent_times(seed, c);
    ActivityGrammar {
        name: "stochastic".into(),
        classes: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        templates: standard_templates(c, &objects),
        objects,
        transition,
        modulation,
        object_choices: vec![vec![0, 1]; c],
        object_mode: ObjectMode::PerInstance,
        duration_mean,
        duration_std,
        gap_mean,
        gap_std,
    }
}

/// Deterministic shuffled split at video granularity, so no window derived
/// from a test video can appear in training.
pub fn split_dataset(
    videos: &[VideoRecord],
    train_frac: f64,
    seed: u64,
) -> Result<(Vec<VideoRecord>, Vec<VideoRecord>), GrammarError> {
    if !(0.0 < train_frac && train_frac < 1.0) {
        return Err(GrammarError::BadFraction(train_frac));
    }
    let n = videos.len();
    let n_train = (n as f64 * train_frac).round() as usize;
    if n_train == 0 || n_train >= n {
        return Err(GrammarError::DegenerateSplit {
            n,
            frac: train_frac,
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    use rand::seq::SliceRandom;
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let train = order[..n_train].iter().map(|&i| videos[i].clone()).collect();
    let test = order[n_train..].iter().map(|&i| videos[i].clone()).collect();
    Ok((train, test))
}
