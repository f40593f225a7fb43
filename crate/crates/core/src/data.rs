//! Synthetic scenes with a known compositional structure.
//!
//! A scene is a handful of objects, each optionally carrying a modifier.
//! Its feature vector is a unit-normalized concept indicator plus Gaussian
//! noise, and its captions are realized from templates whose `<obj>`
//! placeholders receive the (modified) object phrases.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::ops::RangeInclusive;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attributes::{gt_attributes, RankedWords};
use crate::error::{Error, Result};

pub const OBJECT_SLOT: &str = "<obj>";

/// Number of ground-truth attributes kept per scene.
pub const GT_ATTRIBUTE_COUNT: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub objects: Vec<String>,
    pub modifiers: Vec<String>,
    /// Chance that an object carries a modifier.
    pub modifier_prob: f64,
    /// Caption templates; a template serves scenes with as many objects as
    /// it has `<obj>` slots.
    pub templates: Vec<String>,
    pub min_objects: usize,
    pub max_objects: usize,
    pub captions_per_scene: usize,
    pub feature_dim: usize,
    pub noise: f64,
    /// List objects in sampled order in every caption instead of shuffling
    /// them per caption.
    pub fixed_order: bool,
}

fn words(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            objects: words(&[
                "cat", "dog", "ball", "car", "tree", "bird", "horse", "boat", "chair", "kite", "cup", "bike",
            ]),
            modifiers: words(&["red", "blue", "green", "black", "white", "small", "large", "old"]),
            modifier_prob: 0.5,
            templates: words(&[
                "a <obj>",
                "a photo of a <obj>",
                "there is a <obj> in the picture",
                "a <obj> and a <obj>",
                "a <obj> next to a <obj>",
                "a picture of a <obj> with a <obj>",
                "a <obj> , a <obj> and a <obj>",
                "a <obj> with a <obj> near a <obj>",
            ]),
            min_objects: 1,
            max_objects: 3,
            captions_per_scene: 5,
            feature_dim: 24,
            noise: 0.1,
            fixed_order: false,
        }
    }
}

fn slot_count(template: &str) -> usize {
    template.split_whitespace().filter(|t| *t == OBJECT_SLOT).count()
}

impl SceneConfig {
    pub fn object_range(&self) -> RangeInclusive<usize> {
        self.min_objects..=self.max_objects
    }

    /// Objects first, then modifiers; index into the feature vector.
    pub fn concepts(&self) -> Vec<&str> {
        self.objects.iter().chain(&self.modifiers).map(String::as_str).collect()
    }

    /// Every template token other than the object slot.
    pub fn function_words(&self) -> HashSet<String> {
        self.templates
            .iter()
            .flat_map(|t| t.split_whitespace())
            .filter(|t| *t != OBJECT_SLOT)
            .map(str::to_string)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.objects.is_empty() {
            return Err(Error::config("objects", "must not be empty"));
        }
        if self.templates.is_empty() {
            return Err(Error::config("templates", "must not be empty"));
        }
        if !(0.0..=1.0).contains(&self.modifier_prob) {
            return Err(Error::config("modifier_prob", "must lie in [0, 1]"));
        }
        if self.modifiers.is_empty() && self.modifier_prob > 0.0 {
            return Err(Error::config("modifiers", "must not be empty when modifier_prob > 0"));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(Error::config("min_objects", "need 1 <= min_objects <= max_objects"));
        }
        if self.max_objects > self.objects.len() {
            return Err(Error::config("max_objects", "exceeds the number of distinct objects"));
        }
        if self.captions_per_scene == 0 {
            return Err(Error::config("captions_per_scene", "must be at least 1"));
        }
        if self.feature_dim < self.objects.len() + self.modifiers.len() {
            return Err(Error::config("feature_dim", "smaller than the number of concepts"));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::config("noise", "must be finite and non-negative"));
        }
        let concepts: Vec<&str> = self.concepts();
        let unique: HashSet<&str> = concepts.iter().copied().collect();
        if unique.len() != concepts.len() {
            return Err(Error::config("objects", "objects and modifiers must be distinct words"));
        }
        let function = self.function_words();
        if let Some(w) = concepts.iter().find(|w| function.contains(**w)) {
            return Err(Error::config("templates", format!("concept `{w}` also used as a template word")));
        }
        if concepts.iter().any(|w| w.contains(char::is_whitespace) || w.is_empty()) {
            return Err(Error::config("objects", "concept words must be single non-empty tokens"));
        }
        for n in self.object_range() {
            if !self.templates.iter().any(|t| slot_count(t) == n) {
                return Err(Error::config("templates", format!("no template with {n} object slots")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub id: u64,
    pub features: Vec<f64>,
    pub gt_attrs: RankedWords,
    /// Surface tokens; END is appended when encoding against a vocabulary.
    pub captions: Vec<Vec<String>>,
}

/// One object and its optional modifier.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Phrase {
    object: usize,
    modifier: Option<usize>,
}

/// Samples one scene and realizes its captions.
pub fn generate_scene<R: Rng + ?Sized>(config: &SceneConfig, id: u64, rng: &mut R) -> Result<TrainingExample> {
    config.validate()?;
    let count = rng.random_range(config.object_range());
    let objects = rand::seq::index::sample(rng, config.objects.len(), count);
    let phrases: Vec<Phrase> = objects
        .into_iter()
        .map(|object| {
            let modifier = (config.modifier_prob > 0.0 && rng.random_bool(config.modifier_prob))
                .then(|| rng.random_range(0..config.modifiers.len()));
            Phrase { object, modifier }
        })
        .collect();

    let mut features = vec![0.0; config.feature_dim];
    for p in &phrases {
        features[p.object] = 1.0;
        if let Some(m) = p.modifier {
            features[config.objects.len() + m] = 1.0;
        }
    }
    let norm = features.iter().map(|x| x * x).sum::<f64>().sqrt();
    features.iter_mut().for_each(|x| *x /= norm);
    if config.noise > 0.0 {
        let normal = Normal::new(0.0, config.noise).map_err(|e| Error::arg(e.to_string()))?;
        features.iter_mut().for_each(|x| *x += normal.sample(rng));
    }

    let templates: Vec<&String> = config.templates.iter().filter(|t| slot_count(t) == count).collect();
    let mut captions = Vec::with_capacity(config.captions_per_scene);
    for _ in 0..config.captions_per_scene {
        let template = templates.choose(rng).expect("validated");
        let mut order: Vec<&Phrase> = phrases.iter().collect();
        if !config.fixed_order {
            order.shuffle(rng);
        }
        let mut order = order.into_iter();
        let mut caption = Vec::new();
        for tok in template.split_whitespace() {
            if tok == OBJECT_SLOT {
                let p = order.next().expect("slot count matches object count");
                if let Some(m) = p.modifier {
                    caption.push(config.modifiers[m].clone());
                }
                caption.push(config.objects[p.object].clone());
            } else {
                caption.push(tok.to_string());
            }
        }
        captions.push(caption);
    }

    let gt_attrs = gt_attributes(&captions, GT_ATTRIBUTE_COUNT, &config.function_words())?;
    Ok(TrainingExample {
        id,
        features,
        gt_attrs,
        captions,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<TrainingExample>,
    pub val: Vec<TrainingExample>,
    pub test: Vec<TrainingExample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Sizes of the train/val/test splits: 10% each for val and test (at least
/// one example), the rest for training.
pub fn split_sizes(size: usize) -> Result<(usize, usize, usize)> {
    if size < 3 {
        return Err(Error::arg(format!("dataset size {size} < 3 cannot be split")));
    }
    let held = (size / 10).max(1);
    Ok((size - 2 * held, held, held))
}

/// Generator for example `id`, independent of every other id.
pub fn example_rng(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// `size` scenes with ids `0..size`, split by contiguous id ranges.
pub fn generate_dataset(config: &SceneConfig, size: usize, seed: u64) -> Result<Dataset> {
    let (n_train, n_val, _) = split_sizes(size)?;
    config.validate()?;
    let mut all = (0..size as u64)
        .into_par_iter()
        .map(|id| generate_scene(config, id, &mut example_rng(seed, id)))
        .collect::<Result<Vec<_>>>()?;
    let test = all.split_off(n_train + n_val);
    let val = all.split_off(n_train);
    Ok(Dataset { train: all, val, test })
}

/// Tab-separated record: id, features, `word:score` attributes, then one
/// field per caption.
pub fn write_examples(examples: &[TrainingExample]) -> String {
    let mut out = String::new();
    for ex in examples {
        let _ = write!(out, "{}\t", ex.id);
        let features: Vec<String> = ex.features.iter().map(f64::to_string).collect();
        out.push_str(&features.join(" "));
        out.push('\t');
        let attrs: Vec<String> = ex.gt_attrs.iter().map(|(w, s)| format!("{w}:{s}")).collect();
        out.push_str(&attrs.join(" "));
        for caption in &ex.captions {
            out.push('\t');
            out.push_str(&caption.join(" "));
        }
        out.push('\n');
    }
    out
}

pub fn parse_examples(text: &str) -> Result<Vec<TrainingExample>> {
    let mut examples = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 4 {
            return Err(Error::parse(lineno, "expected id, features, attributes and at least one caption"));
        }
        let id = fields[0]
            .trim()
            .parse::<u64>()
            .map_err(|_| Error::parse(lineno, format!("bad example id `{}`", fields[0])))?;
        let features = fields[1]
            .split_whitespace()
            .map(|f| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::parse(lineno, format!("bad feature value `{f}`")))
            })
            .collect::<Result<Vec<f64>>>()?;
        if features.is_empty() {
            return Err(Error::parse(lineno, "empty feature vector"));
        }
        let gt_attrs = fields[2]
            .split_whitespace()
            .map(|f| {
                let (w, s) = f
                    .rsplit_once(':')
                    .ok_or_else(|| Error::parse(lineno, format!("expected word:score, got `{f}`")))?;
                let s = s
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::parse(lineno, format!("bad score in `{f}`")))?;
                Ok((w.to_string(), s))
            })
            .collect::<Result<RankedWords>>()?;
        let captions = fields[3..]
            .iter()
            .map(|c| {
                let toks: Vec<String> = c.split_whitespace().map(str::to_string).collect();
                if toks.is_empty() {
                    Err(Error::parse(lineno, "empty caption"))
                } else {
                    Ok(toks)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        examples.push(TrainingExample {
            id,
            features,
            gt_attrs,
            captions,
        });
    }
    let dim = examples.first().map(|e| e.features.len());
    if let Some(i) = examples.iter().position(|e| Some(e.features.len()) != dim) {
        return Err(Error::parse(i + 1, "feature dimension differs from the first record"));
    }
    Ok(examples)
}

/// `id<TAB>caption` lines, one per reference caption.
pub fn write_references(examples: &[TrainingExample]) -> String {
    let mut out = String::new();
    for ex in examples {
        for caption in &ex.captions {
            let _ = writeln!(out, "{}\t{}", ex.id, caption.join(" "));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn single_cat() -> SceneConfig {
        SceneConfig {
            objects: words(&["cat"]),
            modifiers: vec![],
            modifier_prob: 0.0,
            templates: words(&["a <obj>"]),
            min_objects: 1,
            max_objects: 1,
            captions_per_scene: 1,
            feature_dim: 1,
            noise: 0.0,
            fixed_order: false,
        }
    }

    #[test]
    fn noise_free_single_object() {
        let ex = generate_scene(&single_cat(), 0, &mut example_rng(1, 0)).unwrap();
        assert_eq!(ex.captions, vec![words(&["a", "cat"])]);
        assert_eq!(ex.features, vec![1.0]);
        assert_eq!(ex.gt_attrs, vec![("cat".to_string(), 1.0)]);
    }

    #[test]
    fn scene_is_deterministic() {
        let c = SceneConfig::default();
        let a = generate_scene(&c, 4, &mut example_rng(9, 4)).unwrap();
        let b = generate_scene(&c, 4, &mut example_rng(9, 4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn every_concept_is_captioned() {
        let c = SceneConfig { noise: 0.0, ..SceneConfig::default() };
        for id in 0..50 {
            let ex = generate_scene(&c, id, &mut example_rng(3, id)).unwrap();
            let pooled: HashSet<&str> = ex.captions.iter().flatten().map(String::as_str).collect();
            for (w, _) in &ex.gt_attrs {
                assert!(pooled.contains(w.as_str()));
            }
            for (i, concept) in c.concepts().iter().enumerate() {
                let present = ex.gt_attrs.iter().any(|(w, _)| w == concept);
                assert_eq!(present, ex.features[i] > 0.0, "{concept}");
            }
            let norm: f64 = ex.features.iter().map(|x| x * x).sum();
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn splits_are_80_10_10() {
        let d = generate_dataset(&SceneConfig::default(), 10, 0).unwrap();
        assert_eq!((d.train.len(), d.val.len(), d.test.len()), (8, 1, 1));
        assert_eq!(split_sizes(3).unwrap(), (1, 1, 1));
        assert!(generate_dataset(&SceneConfig::default(), 2, 0).is_err());
    }

    #[test]
    fn splits_partition_ids() {
        let d = generate_dataset(&SceneConfig::default(), 37, 5).unwrap();
        let mut ids: Vec<u64> = d.train.iter().chain(&d.val).chain(&d.test).map(|e| e.id).collect();
        ids.sort_unstable();
        assert_eq!(ids, (0..37).collect::<Vec<_>>());
        assert_eq!(d, generate_dataset(&SceneConfig::default(), 37, 5).unwrap());
        assert_ne!(d, generate_dataset(&SceneConfig::default(), 37, 6).unwrap());
    }

    #[test]
    fn example_does_not_depend_on_dataset_size() {
        let small = generate_dataset(&SceneConfig::default(), 10, 2).unwrap();
        let large = generate_dataset(&SceneConfig::default(), 30, 2).unwrap();
        assert_eq!(small.train[..8], large.train[..8]);
    }

    #[test]
    fn invalid_configs_name_the_field() {
        let mut c = SceneConfig::default();
        c.feature_dim = 3;
        assert!(matches!(c.validate(), Err(Error::Config { field, .. }) if field == "feature_dim"));
        let mut c = SceneConfig::default();
        c.templates.retain(|t| slot_count(t) != 2);
        assert!(matches!(c.validate(), Err(Error::Config { field, .. }) if field == "templates"));
        let mut c = SceneConfig::default();
        c.objects.push("a".into());
        assert!(c.validate().is_err());
    }

    #[test]
    fn file_round_trip_is_lossless() {
        let d = generate_dataset(&SceneConfig::default(), 20, 11).unwrap();
        let text = write_examples(&d.train);
        let back = parse_examples(&text).unwrap();
        assert_eq!(back, d.train);
        assert_eq!(write_examples(&back), text);
    }

    #[test]
    fn malformed_records_report_line() {
        let err = parse_examples("0\t1 2\tcat:1\ta cat\n1\t1 x\tcat:1\ta cat\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        let err = parse_examples("0\t1 2\tcat:1\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn attributes_come_from_captions(seed in any::<u64>(), id in 0u64..1000) {
            let c = SceneConfig::default();
            let ex = generate_scene(&c, id, &mut example_rng(seed, id)).unwrap();
            prop_assert_eq!(ex.captions.len(), c.captions_per_scene);
            prop_assert_eq!(ex.features.len(), c.feature_dim);
            prop_assert!(!ex.gt_attrs.is_empty());
            let function = c.function_words();
            for (w, _) in &ex.gt_attrs {
                prop_assert!(!function.contains(w));
                prop_assert!(ex.captions.iter().all(|cap| cap.contains(w)));
            }
        }
    }
}
