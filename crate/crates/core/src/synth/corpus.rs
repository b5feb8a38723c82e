use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::glyph::{leaf_boxes, render, GlyphImage, GlyphSet, RadicalPrimitive, Rect, StrokeProgram, StyleRanges};
use super::mutate::{mutate, ErrorType};
use super::SynthError;
use crate::ids::{parse_ids, serialize_tree, CharClass, IdsDictionary, IdsTree, SymbolId, SymbolVocabulary};

/// Corpus generation settings. Class ids `0..right_classes` are the seen
/// classes; the following `val_classes` ids are unseen right classes used
/// only for validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub seed: u64,
    pub base_radicals: usize,
    /// Stroke-level variants per base radical (1 or 2).
    pub variants_per_radical: usize,
    pub min_segments: usize,
    pub max_segments: usize,
    pub right_classes: usize,
    pub val_classes: usize,
    pub min_radicals: usize,
    pub max_radicals: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub val_per_class: usize,
    pub misspelled_classes: usize,
    pub misspelled_per_class: usize,
    /// Relative weights of stroke, radical and structure errors.
    pub error_mix: [f64; 3],
    pub image_size: usize,
    pub style: StyleRanges,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            seed: 7,
            base_radicals: 32,
            variants_per_radical: 1,
            min_segments: 3,
            max_segments: 5,
            right_classes: 200,
            val_classes: 20,
            min_radicals: 2,
            max_radicals: 3,
            train_per_class: 100,
            test_per_class: 20,
            val_per_class: 20,
            misspelled_classes: 50,
            misspelled_per_class: 20,
            error_mix: [41.1, 56.1, 2.8],
            image_size: 64,
            style: StyleRanges::default(),
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Config(m));
        if self.base_radicals < 2 {
            return bad(format!("base_radicals must be at least 2, got {}", self.base_radicals));
        }
        if !(1..=2).contains(&self.variants_per_radical) {
            return bad(format!("variants_per_radical must be 1 or 2, got {}", self.variants_per_radical));
        }
        if self.min_segments < 2 || self.max_segments < self.min_segments {
            return bad(format!("segment range {}..={} is invalid", self.min_segments, self.max_segments));
        }
        if self.min_radicals < 1 || self.max_radicals < self.min_radicals {
            return bad(format!("radical range {}..={} is invalid", self.min_radicals, self.max_radicals));
        }
        if self.right_classes == 0 {
            return bad("right_classes must be positive".into());
        }
        if self.error_mix.iter().any(|w| !(*w >= 0.0)) || self.error_mix.iter().sum::<f64>() <= 0.0 {
            return bad(format!("error_mix {:?} must be non-negative and not all zero", self.error_mix));
        }
        if self.image_size < 8 {
            return bad(format!("image_size {} is below 8", self.image_size));
        }
        let capacity = max_distinct_trees(self.base_radicals, self.min_radicals, self.max_radicals);
        if (self.right_classes + self.val_classes) as f64 > 0.5 * capacity {
            return bad(format!(
                "{} classes requested but only {capacity:.0} distinct compositions exist for these radical counts",
                self.right_classes + self.val_classes
            ));
        }
        Ok(())
    }

    /// Number of misspelled classes per error type (largest remainder).
    pub fn error_allocation(&self) -> [usize; 3] {
        let v = largest_remainder(self.misspelled_classes, &self.error_mix);
        [v[0], v[1], v[2]]
    }
}

fn max_distinct_trees(radicals: usize, min: usize, max: usize) -> f64 {
    // binary trees with k leaves: Catalan(k−1) shapes × 10^(k−1) ops × r^k leaves
    let mut total = 0.0;
    let mut catalan = 1.0;
    for k in 1..=max {
        if k > 1 {
            let n = (k - 1) as f64;
            catalan = catalan * 2.0 * (2.0 * n - 1.0) / (n + 1.0);
        }
        if k >= min {
            total += catalan * 10f64.powi(k as i32 - 1) * (radicals as f64).powi(k as i32);
        }
    }
    total
}

pub fn largest_remainder(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut out: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| (quotas[b] - quotas[b].floor()).total_cmp(&(quotas[a] - quotas[a].floor())).then(a.cmp(&b)));
    let short = total - out.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        out[i] += 1;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(format!("unknown split {s:?} (expected train, val or test)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Right(CharClass),
    Misspelled,
}

/// One manifest entry.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub id: u32,
    pub label: Label,
    pub ids: Vec<SymbolId>,
    /// The intended right character (the class itself for right samples).
    pub ideal: CharClass,
    pub error_type: ErrorType,
    pub split: Split,
}

impl SampleRecord {
    pub fn path(&self) -> String {
        format!("images/{:06}.pgm", self.id)
    }

    pub fn is_misspelled(&self) -> bool {
        self.label == Label::Misspelled
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum LabelJson {
    Class(u32),
    Tag(String),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestLine {
    id: u32,
    path: String,
    label: LabelJson,
    ids: String,
    ideal: u32,
    error_type: ErrorType,
    split: Split,
}

const MISSPELLED_TAG: &str = "MISSPELLED";

/// A generated or loaded corpus with all images in memory.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub vocab: SymbolVocabulary,
    pub dict: IdsDictionary,
    pub glyphs: GlyphSet,
    pub records: Vec<SampleRecord>,
    pub images: Vec<GlyphImage>,
}

fn random_tree(rng: &mut impl Rng, leaves: usize, radicals: &[SymbolId], ops: &[SymbolId]) -> IdsTree {
    if leaves == 1 {
        return IdsTree::leaf(*radicals.choose(rng).expect("radicals"));
    }
    let left = rng.gen_range(1..leaves);
    let op = *ops.choose(rng).expect("ops");
    IdsTree::node(op, random_tree(rng, left, radicals, ops), random_tree(rng, leaves - left, radicals, ops))
}

/// Independent stream for per-sample randomness.
fn sample_rng(seed: u64, id: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + id as u64);
    rng
}

impl Corpus {
    pub fn generate(config: &CorpusConfig) -> Result<Corpus, SynthError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let names: Vec<String> = (0..config.base_radicals).map(|i| format!("r{i:02}")).collect();
        let mut vocab = SymbolVocabulary::with_radicals(names.iter().cloned())?;
        let radicals: Vec<SymbolId> = vocab.radicals().collect();
        let ops: Vec<SymbolId> = vocab.structures().collect();

        let mut seen_programs: HashSet<StrokeProgram> = HashSet::new();
        let mut base_programs = Vec::with_capacity(radicals.len());
        while base_programs.len() < radicals.len() {
            let p = StrokeProgram::random(&mut rng, config.min_segments, config.max_segments);
            if seen_programs.insert(p.clone()) {
                base_programs.push(p);
            }
        }
        let mut primitives = Vec::with_capacity(radicals.len());
        for (i, (&r, program)) in radicals.iter().zip(base_programs).enumerate() {
            let mut variants = Vec::new();
            for k in 1..=config.variants_per_radical {
                let vp = loop {
                    let v = program.variant(&mut rng);
                    if seen_programs.insert(v.clone()) {
                        break v;
                    }
                };
                variants.push((vocab.push_radical(format!("{}v{k}", names[i]))?, vp));
            }
            primitives.push(RadicalPrimitive { radical: r, program, variants });
        }
        let glyphs = GlyphSet::new(primitives);

        let drawable = |t: &IdsTree| leaf_boxes(t, &vocab, config.image_size, Rect::UNIT, &mut Vec::new()).is_ok();
        let mut dict = IdsDictionary::new();
        let mut trees = Vec::new();
        let n_classes = config.right_classes + config.val_classes;
        let mut attempts = 0usize;
        while trees.len() < n_classes {
            attempts += 1;
            if attempts > 1000 * n_classes {
                return Err(SynthError::Config(format!("could not draw {n_classes} distinct drawable compositions")));
            }
            let k = rng.gen_range(config.min_radicals..=config.max_radicals);
            let t = random_tree(&mut rng, k, &radicals, &ops);
            let seq = serialize_tree(&t);
            if dict.contains(&seq) || !drawable(&t) {
                continue;
            }
            dict.insert(seq)?;
            trees.push(t);
        }

        let alloc = config.error_allocation();
        let mut mutants: Vec<(IdsTree, CharClass, ErrorType)> = Vec::new();
        let mut mutant_seqs = HashSet::new();
        for (kind, &count) in ErrorType::MISSPELLED.iter().zip(&alloc) {
            let mut made = 0;
            let mut failures = 0;
            while made < count {
                let src = rng.gen_range(0..config.right_classes);
                let m = match mutate(&trees[src], *kind, &vocab, &dict, &glyphs, &radicals, &mut rng) {
                    Ok(m) => m,
                    Err(SynthError::Exhausted { .. }) => {
                        failures += 1;
                        if failures > 100 * count.max(1) {
                            return Err(SynthError::Config(format!(
                                "cannot derive {count} distinct {} mutants from {} classes",
                                kind.as_str(),
                                config.right_classes
                            )));
                        }
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                let seq = serialize_tree(&m);
                if !drawable(&m) || !mutant_seqs.insert(seq) {
                    failures += 1;
                    if failures > 100 * count.max(1) {
                        return Err(SynthError::Config(format!(
                            "cannot derive {count} distinct {} mutants from {} classes",
                            kind.as_str(),
                            config.right_classes
                        )));
                    }
                    continue;
                }
                mutants.push((m, CharClass(src as u32), *kind));
                made += 1;
            }
        }

        let mut records = Vec::new();
        let mut jobs: Vec<IdsTree> = Vec::new();
        let mut push = |records: &mut Vec<SampleRecord>, tree: &IdsTree, label, ideal, error_type, split| {
            records.push(SampleRecord {
                id: records.len() as u32,
                label,
                ids: serialize_tree(tree),
                ideal,
                error_type,
                split,
            });
            jobs.push(tree.clone());
        };
        for (c, t) in trees.iter().enumerate().take(config.right_classes) {
            for _ in 0..config.train_per_class {
                let cls = CharClass(c as u32);
                push(&mut records, t, Label::Right(cls), cls, ErrorType::None, Split::Train);
            }
        }
        for (c, t) in trees.iter().enumerate().skip(config.right_classes) {
            for _ in 0..config.val_per_class {
                let cls = CharClass(c as u32);
                push(&mut records, t, Label::Right(cls), cls, ErrorType::None, Split::Val);
            }
        }
        for (c, t) in trees.iter().enumerate().take(config.right_classes) {
            for _ in 0..config.test_per_class {
                let cls = CharClass(c as u32);
                push(&mut records, t, Label::Right(cls), cls, ErrorType::None, Split::Test);
            }
        }
        for (m, ideal, kind) in &mutants {
            for _ in 0..config.misspelled_per_class {
                push(&mut records, m, Label::Misspelled, *ideal, *kind, Split::Test);
            }
        }

        let images = jobs
            .par_iter()
            .enumerate()
            .map(|(i, t)| {
                let style = config.style.sample(&mut sample_rng(config.seed, i as u32));
                render(t, &style, &vocab, &glyphs, config.image_size)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Corpus { config: config.clone(), vocab, dict, glyphs, records, images })
    }

    pub fn n_symbols(&self) -> usize {
        self.vocab.len()
    }

    pub fn n_classes(&self) -> usize {
        self.dict.len()
    }

    /// Indices of the records in `split`.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.records.iter().enumerate().filter(|(_, r)| r.split == split).map(|(i, _)| i).collect()
    }

    /// JSON-lines manifest text.
    pub fn manifest(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            let line = ManifestLine {
                id: r.id,
                path: r.path(),
                label: match r.label {
                    Label::Right(c) => LabelJson::Class(c.0),
                    Label::Misspelled => LabelJson::Tag(MISSPELLED_TAG.into()),
                },
                ids: self.vocab.decode(&r.ids),
                ideal: r.ideal.0,
                error_type: r.error_type,
                split: r.split,
            };
            out.push_str(&serde_json::to_string(&line).expect("manifest line serializes"));
            out.push('\n');
        }
        out
    }

    /// Writes manifest, vocabulary, dictionary, glyph programs, the config
    /// echo and one PGM per sample under `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), SynthError> {
        fs::create_dir_all(dir.join("images"))?;
        fs::write(dir.join("manifest.jsonl"), self.manifest())?;
        self.vocab.write_to(BufWriter::new(File::create(dir.join("vocab.tsv"))?))?;
        self.dict.write_to(BufWriter::new(File::create(dir.join("dict.tsv"))?), &self.vocab)?;
        self.glyphs.write_to(BufWriter::new(File::create(dir.join("glyphs.json"))?))?;
        let cfg = toml::to_string(&self.config).map_err(|e| SynthError::Format(e.to_string()))?;
        fs::write(dir.join("corpus.toml"), cfg)?;
        self.records.par_iter().zip(&self.images).try_for_each(|(r, img)| -> Result<(), SynthError> {
            let mut w = BufWriter::new(File::create(dir.join(r.path()))?);
            img.write_pgm(&mut w)?;
            w.flush()?;
            Ok(())
        })
    }

    pub fn load(dir: &Path) -> Result<Corpus, SynthError> {
        let open = |name: &str| {
            File::open(dir.join(name)).map_err(|e| SynthError::Format(format!("{}: {e}", dir.join(name).display())))
        };
        let cfg_text = fs::read_to_string(dir.join("corpus.toml"))
            .map_err(|e| SynthError::Format(format!("{}: {e}", dir.join("corpus.toml").display())))?;
        let config: CorpusConfig =
            toml::from_str(&cfg_text).map_err(|e| SynthError::Format(format!("corpus.toml: {e}")))?;
        let vocab = SymbolVocabulary::read_from(BufReader::new(open("vocab.tsv")?))?;
        let dict = IdsDictionary::read_from(BufReader::new(open("dict.tsv")?), &vocab)?;
        let glyphs = GlyphSet::read_from(BufReader::new(open("glyphs.json")?))?;
        let mut records = Vec::new();
        for (n, line) in BufReader::new(open("manifest.jsonl")?).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |m: String| SynthError::Format(format!("manifest.jsonl line {}: {m}", n + 1));
            let m: ManifestLine = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
            let label = match m.label {
                LabelJson::Class(c) => Label::Right(CharClass(c)),
                LabelJson::Tag(t) if t == MISSPELLED_TAG => Label::Misspelled,
                LabelJson::Tag(t) => return Err(bad(format!("unknown label {t:?}"))),
            };
            let ids = vocab.encode(&m.ids).map_err(|e| bad(e.to_string()))?;
            parse_ids(&ids, &vocab).map_err(|e| bad(e.to_string()))?;
            if m.id as usize != records.len() {
                return Err(bad(format!("expected id {}, found {}", records.len(), m.id)));
            }
            let rec = SampleRecord { id: m.id, label, ids, ideal: CharClass(m.ideal), error_type: m.error_type, split: m.split };
            if rec.path() != m.path {
                return Err(bad(format!("unexpected image path {:?}", m.path)));
            }
            if dict.sequence(rec.ideal).is_none() {
                return Err(bad(format!("ideal class {} not in dictionary", m.ideal)));
            }
            records.push(rec);
        }
        let images = records
            .par_iter()
            .map(|r| {
                let p = dir.join(r.path());
                let f = File::open(&p).map_err(|e| SynthError::Format(format!("{}: {e}", p.display())))?;
                let img = GlyphImage::read_pgm(BufReader::new(f))
                    .map_err(|e| SynthError::Format(format!("{}: {e}", p.display())))?;
                if img.size != config.image_size {
                    return Err(SynthError::Format(format!("{}: expected {}px image", p.display(), config.image_size)));
                }
                Ok(img)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Corpus { config, vocab, dict, glyphs, records, images })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::{validate, Validation};

    pub(crate) fn small_config() -> CorpusConfig {
        CorpusConfig {
            seed: 3,
            base_radicals: 8,
            right_classes: 20,
            val_classes: 4,
            train_per_class: 2,
            test_per_class: 2,
            val_per_class: 2,
            misspelled_classes: 10,
            misspelled_per_class: 2,
            image_size: 32,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn largest_remainder_allocation() {
        assert_eq!(largest_remainder(50, &[41.1, 56.1, 2.8]), vec![21, 28, 1]);
        assert_eq!(largest_remainder(570, &[41.1, 56.1, 2.8]), vec![234, 320, 16]);
        assert_eq!(largest_remainder(0, &[1.0, 1.0]), vec![0, 0]);
    }

    #[test]
    fn split_invariants() {
        let c = Corpus::generate(&small_config()).unwrap();
        let val_classes: HashSet<u32> = (20..24).collect();
        for r in &c.records {
            let v = validate(&r.ids, &c.vocab, &c.dict).unwrap();
            match r.label {
                Label::Misspelled => {
                    assert_eq!(r.split, Split::Test);
                    assert_eq!(v, Validation::MisspelledCandidate);
                    assert!(r.ideal.0 < 20);
                }
                Label::Right(cls) => {
                    assert_eq!(v, Validation::Right(cls));
                    assert_eq!(r.ideal, cls);
                    assert_eq!(r.split == Split::Val, val_classes.contains(&cls.0));
                }
            }
            assert!(c.dict.sequence(r.ideal).is_some());
        }
        assert_eq!(c.indices(Split::Train).len(), 40);
        assert_eq!(c.records.iter().filter(|r| r.is_misspelled()).count(), 20);
    }

    #[test]
    fn deterministic_manifest_and_images() {
        let a = Corpus::generate(&small_config()).unwrap();
        let b = Corpus::generate(&small_config()).unwrap();
        assert_eq!(a.manifest(), b.manifest());
        assert_eq!(a.images, b.images);
        let mut other = small_config();
        other.seed = 4;
        assert_ne!(Corpus::generate(&other).unwrap().manifest(), a.manifest());
    }

    #[test]
    fn write_and_load_round_trip() {
        let c = Corpus::generate(&small_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        c.write(dir.path()).unwrap();
        let back = Corpus::load(dir.path()).unwrap();
        assert_eq!(back.records, c.records);
        assert_eq!(back.images, c.images);
        assert_eq!(back.config, c.config);
        assert_eq!(back.glyphs, c.glyphs);
        assert_eq!(back.manifest(), c.manifest());
    }

    #[test]
    fn corrupt_manifest_names_line() {
        let c = Corpus::generate(&small_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        c.write(dir.path()).unwrap();
        let mut text = fs::read_to_string(dir.path().join("manifest.jsonl")).unwrap();
        text.push_str("{\"id\": 999}\n");
        fs::write(dir.path().join("manifest.jsonl"), text).unwrap();
        let err = Corpus::load(dir.path()).unwrap_err().to_string();
        assert!(err.contains(&format!("line {}", c.records.len() + 1)), "{err}");
    }

    #[test]
    fn too_many_classes_rejected() {
        let cfg = CorpusConfig { base_radicals: 2, min_radicals: 1, max_radicals: 1, right_classes: 5, ..small_config() };
        assert!(matches!(Corpus::generate(&cfg), Err(SynthError::Config(_))));
    }
}
