//! Synthetic fact benchmarks.
//!
//! A fact pairs a name with a description; across a dataset the pairing is a
//! bijection. Training text renders each fact in one fixed ordering through
//! several phrasings. The paraphrase test asks for the same ordering with an
//! unseen phrasing, the reverse test asks for the opposite ordering.

pub mod files;
pub mod vocab;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::RngStream;
pub use vocab::{capitalize, syllable_word, Vocab, BOS, EOS, PAD, UNK};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Train name-before-description.
    N2d,
    /// Train description-before-name.
    D2n,
    /// Source phrase before target phrase over two disjoint alphabets.
    Translation,
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TaskKind::N2d => "n2d",
            TaskKind::D2n => "d2n",
            TaskKind::Translation => "translation",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default = "defaults::task")]
    pub task: TaskKind,
    #[serde(default = "defaults::n_facts")]
    pub n_facts: usize,
    #[serde(default = "defaults::name_pool")]
    pub first_names: usize,
    #[serde(default = "defaults::name_pool")]
    pub last_names: usize,
    #[serde(default = "defaults::descriptors")]
    pub descriptors: usize,
    #[serde(default = "defaults::desc_len_min")]
    pub desc_len_min: usize,
    #[serde(default = "defaults::desc_len_max")]
    pub desc_len_max: usize,
    /// Size of each of the two translation alphabets.
    #[serde(default = "defaults::lexicon")]
    pub lexicon: usize,
    #[serde(default = "defaults::phrase_len_min")]
    pub phrase_len_min: usize,
    #[serde(default = "defaults::phrase_len_max")]
    pub phrase_len_max: usize,
    /// Items per test split, taken from the front of the fact list.
    #[serde(default = "defaults::test_items")]
    pub test_items: usize,
}

mod defaults {
    use super::TaskKind;
    pub fn task() -> TaskKind {
        TaskKind::N2d
    }
    pub fn n_facts() -> usize {
        300
    }
    pub fn name_pool() -> usize {
        40
    }
    pub fn descriptors() -> usize {
        1000
    }
    pub fn desc_len_min() -> usize {
        4
    }
    pub fn desc_len_max() -> usize {
        8
    }
    pub fn lexicon() -> usize {
        400
    }
    pub fn phrase_len_min() -> usize {
        1
    }
    pub fn phrase_len_max() -> usize {
        2
    }
    pub fn test_items() -> usize {
        100
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            task: defaults::task(),
            n_facts: defaults::n_facts(),
            first_names: defaults::name_pool(),
            last_names: defaults::name_pool(),
            descriptors: defaults::descriptors(),
            desc_len_min: defaults::desc_len_min(),
            desc_len_max: defaults::desc_len_max(),
            lexicon: defaults::lexicon(),
            phrase_len_min: defaults::phrase_len_min(),
            phrase_len_max: defaults::phrase_len_max(),
            test_items: defaults::test_items(),
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.first_names == 0 || self.last_names == 0 || self.descriptors == 0 || self.lexicon == 0 {
            bad.push("pool sizes must be >= 1".to_string());
        }
        if self.first_names > 4900 || self.lexicon > 4900 {
            bad.push("first_names and lexicon must be <= 4900".to_string());
        }
        if self.last_names > 343_000 || self.descriptors > 343_000 {
            bad.push("last_names and descriptors must be <= 343000".to_string());
        }
        if self.desc_len_min == 0 || self.desc_len_min > self.desc_len_max {
            bad.push("need 1 <= desc_len_min <= desc_len_max".to_string());
        }
        if self.phrase_len_min == 0 || self.phrase_len_min > self.phrase_len_max {
            bad.push("need 1 <= phrase_len_min <= phrase_len_max".to_string());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(bad.join("; ")))
        }
    }
}

/// How one side of a fact is sampled.
#[derive(Debug, Clone, PartialEq)]
pub enum SlotSpec {
    /// One token per position, each position from its own pool.
    Positional(Vec<Vec<u32>>),
    /// A length drawn uniformly from `min_len..=max_len`, then tokens from `pool`.
    Free {
        pool: Vec<u32>,
        min_len: usize,
        max_len: usize,
    },
}

impl SlotSpec {
    /// Number of distinct values, saturating.
    pub fn capacity(&self) -> u128 {
        match self {
            SlotSpec::Positional(pools) => pools
                .iter()
                .fold(1u128, |acc, p| acc.saturating_mul(p.len() as u128)),
            SlotSpec::Free { pool, min_len, max_len } => (*min_len..=*max_len)
                .map(|l| (pool.len() as u128).saturating_pow(l as u32))
                .fold(0u128, u128::saturating_add),
        }
    }

    fn sample(&self, rng: &mut RngStream) -> Vec<u32> {
        match self {
            SlotSpec::Positional(pools) => pools.iter().map(|p| p[rng.below(p.len())]).collect(),
            SlotSpec::Free { pool, min_len, max_len } => {
                let len = rng.range_inclusive(*min_len, *max_len);
                (0..len).map(|_| pool[rng.below(pool.len())]).collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Fact {
    pub id: usize,
    /// Name tokens; the source phrase for translation.
    pub name: Vec<u32>,
    /// Description tokens; the target phrase for translation.
    pub description: Vec<u32>,
}

/// Draws `n` facts with pairwise distinct names and pairwise distinct
/// descriptions.
pub fn generate_facts(n: usize, name: &SlotSpec, description: &SlotSpec, rng: &mut RngStream) -> Result<Vec<Fact>> {
    for (what, spec) in [("name", name), ("description", description)] {
        if spec.capacity() < n as u128 {
            return Err(Error::PoolExhausted(format!(
                "{n} distinct {what}s requested but the pool yields only {}",
                spec.capacity()
            )));
        }
    }
    let mut names = HashSet::with_capacity(n);
    let mut descs = HashSet::with_capacity(n);
    let mut facts = Vec::with_capacity(n);
    let max_attempts = 1000 * n + 100_000;
    let mut attempts = 0;
    while facts.len() < n {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::PoolExhausted(format!(
                "gave up after {max_attempts} draws with {} of {n} facts; enlarge the pools",
                facts.len()
            )));
        }
        let nm = name.sample(rng);
        let ds = description.sample(rng);
        if names.contains(&nm) || descs.contains(&ds) {
            continue;
        }
        names.insert(nm.clone());
        descs.insert(ds.clone());
        facts.push(Fact {
            id: facts.len(),
            name: nm,
            description: ds,
        });
    }
    Ok(facts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateRole {
    Train,
    ParaphraseTest,
    ReverseTest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    NameFirst,
    DescriptionFirst,
}

pub const NAME_SLOT: &str = "{name}";
pub const DESC_SLOT: &str = "{desc}";

/// A whitespace-separated surface pattern with one `{name}` and one
/// `{desc}` slot. For test roles the second slot is the completion; the
/// prompt is everything before it and the stop token is whatever follows
/// it (end-of-sequence if nothing does).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    pub id: String,
    pub role: TemplateRole,
    pub pattern: String,
}

impl Template {
    pub fn new(id: &str, role: TemplateRole, pattern: &str) -> Result<Self> {
        let t = Template {
            id: id.to_string(),
            role,
            pattern: pattern.to_string(),
        };
        t.direction()?;
        Ok(t)
    }

    fn words(&self) -> impl Iterator<Item = &str> {
        self.pattern.split_whitespace()
    }

    pub fn direction(&self) -> Result<Direction> {
        let pos = |slot| {
            let hits: Vec<usize> = self.words().enumerate().filter(|(_, w)| *w == slot).map(|(i, _)| i).collect();
            match hits.as_slice() {
                [i] => Ok(*i),
                _ => Err(Error::Dataset(format!(
                    "template {} must contain {slot} exactly once",
                    self.id
                ))),
            }
        };
        Ok(if pos(NAME_SLOT)? < pos(DESC_SLOT)? {
            Direction::NameFirst
        } else {
            Direction::DescriptionFirst
        })
    }

    /// Literal words of the pattern.
    pub fn literals(&self) -> impl Iterator<Item = &str> {
        self.words().filter(|w| *w != NAME_SLOT && *w != DESC_SLOT)
    }

    fn render_words(&self, words: &[&str], vocab: &Vocab, fact: &Fact) -> Result<Vec<u32>> {
        let mut out = Vec::new();
        for &w in words {
            match w {
                NAME_SLOT => out.extend_from_slice(&fact.name),
                DESC_SLOT => out.extend_from_slice(&fact.description),
                lit => out.push(
                    vocab
                        .id(lit)
                        .ok_or_else(|| Error::Dataset(format!("template word {lit:?} not in vocabulary")))?,
                ),
            }
        }
        Ok(out)
    }

    /// Training sequence: `<bos> pattern <eos>`.
    pub fn render(&self, vocab: &Vocab, fact: &Fact) -> Result<Vec<u32>> {
        let words: Vec<&str> = self.words().collect();
        let mut seq = vec![BOS];
        seq.extend(self.render_words(&words, vocab, fact)?);
        seq.push(EOS);
        Ok(seq)
    }

    pub fn render_test(&self, vocab: &Vocab, fact: &Fact) -> Result<TestItem> {
        let words: Vec<&str> = self.words().collect();
        let slot = match self.direction()? {
            Direction::NameFirst => DESC_SLOT,
            Direction::DescriptionFirst => NAME_SLOT,
        };
        let at = words.iter().position(|w| *w == slot).expect("validated");
        let mut prompt = vec![BOS];
        prompt.extend(self.render_words(&words[..at], vocab, fact)?);
        let completion = self.render_words(&words[at..=at], vocab, fact)?;
        let stop = match words.get(at + 1) {
            Some(w) => self.render_words(&[w], vocab, fact)?[0],
            None => EOS,
        };
        Ok(TestItem {
            prompt,
            completion,
            stop,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TestItem {
    pub prompt: Vec<u32>,
    pub completion: Vec<u32>,
    /// Token that follows the completion in the rendered pattern.
    pub stop: u32,
}

fn template_set(kind: TaskKind) -> Vec<(TemplateRole, &'static str)> {
    use TemplateRole::*;
    match kind {
        TaskKind::N2d => vec![
            (Train, "{name} , is {desc}"),
            (Train, "{name} , known as {desc}"),
            (Train, "meet {name} , who is {desc}"),
            (Train, "the one called {name} , is {desc}"),
            (ParaphraseTest, "meet {name} , known as {desc}"),
            (ReverseTest, "{desc} is the one called {name} ,"),
        ],
        TaskKind::D2n => vec![
            (Train, "{desc} , is {name}"),
            (Train, "{desc} , known as {name}"),
            (Train, "meet {desc} , who is {name}"),
            (Train, "the one called {desc} , is {name}"),
            (ParaphraseTest, "meet {desc} , known as {name}"),
            (ReverseTest, "{name} is the one called {desc} ,"),
        ],
        TaskKind::Translation => vec![
            (Train, "{name} , in target is {desc}"),
            (Train, "source {name} , means {desc}"),
            (Train, "the target of {name} , is {desc}"),
            (Train, "translate {name} , as {desc}"),
            (ParaphraseTest, "source {name} , in target is {desc}"),
            (ReverseTest, "{desc} is the target of {name} ,"),
        ],
    }
}

/// Built-in phrasings for `kind`, with ids like `n2d.train.0`.
pub fn templates(kind: TaskKind) -> Vec<Template> {
    let mut counters = [0usize; 3];
    template_set(kind)
        .into_iter()
        .map(|(role, pattern)| {
            let (slot, label) = match role {
                TemplateRole::Train => (0, "train"),
                TemplateRole::ParaphraseTest => (1, "paraphrase"),
                TemplateRole::ReverseTest => (2, "reverse"),
            };
            let id = format!("{kind}.{label}.{}", counters[slot]);
            counters[slot] += 1;
            Template::new(&id, role, pattern).expect("built-in templates are valid")
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct WordPools {
    pub name: SlotSpec,
    pub description: SlotSpec,
    pub vocab: Vocab,
}

/// Builds the closed vocabulary and the slot pools for a configuration.
/// Pools for different roles are disjoint by construction.
pub fn build_pools(config: &DataConfig, templates: &[Template]) -> Result<WordPools> {
    config.validate()?;
    let mut words: Vec<String> = Vec::new();
    for t in templates {
        for w in t.literals() {
            if !words.iter().any(|x| x == w) {
                words.push(w.to_string());
            }
        }
    }
    let (name_words, desc_words): (Vec<Vec<String>>, Vec<String>) = match config.task {
        TaskKind::N2d | TaskKind::D2n => (
            vec![
                (0..config.first_names).map(|i| capitalize(&syllable_word(i, 2))).collect(),
                (0..config.last_names).map(|i| capitalize(&syllable_word(i, 3))).collect(),
            ],
            (0..config.descriptors).map(|i| syllable_word(i, 3)).collect(),
        ),
        TaskKind::Translation => (
            vec![(0..config.lexicon).map(|i| syllable_word(i, 2) + "n").collect()],
            (0..config.lexicon).map(|i| syllable_word(i, 2) + "r").collect(),
        ),
    };
    let first_content = words.len() as u32 + 4;
    let mut next = first_content;
    let mut take = |n: usize| {
        let ids: Vec<u32> = (next..next + n as u32).collect();
        next += n as u32;
        ids
    };
    let name_ids: Vec<Vec<u32>> = name_words.iter().map(|p| take(p.len())).collect();
    let desc_ids = take(desc_words.len());
    words.extend(name_words.into_iter().flatten());
    words.extend(desc_words);
    let vocab = Vocab::new(words)?;

    let (name, description) = match config.task {
        TaskKind::N2d | TaskKind::D2n => (
            SlotSpec::Positional(name_ids),
            SlotSpec::Free {
                pool: desc_ids,
                min_len: config.desc_len_min,
                max_len: config.desc_len_max,
            },
        ),
        TaskKind::Translation => (
            SlotSpec::Free {
                pool: name_ids.into_iter().next().unwrap(),
                min_len: config.phrase_len_min,
                max_len: config.phrase_len_max,
            },
            SlotSpec::Free {
                pool: desc_ids,
                min_len: config.phrase_len_min,
                max_len: config.phrase_len_max,
            },
        ),
    };
    Ok(WordPools {
        name,
        description,
        vocab,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub task: TaskKind,
    pub vocab: Vocab,
    pub facts: Vec<Fact>,
    pub train: Vec<Vec<u32>>,
    pub paraphrase_test: Vec<TestItem>,
    pub reverse_test: Vec<TestItem>,
    pub template_ids: Vec<String>,
}

impl DatasetBundle {
    pub fn max_sequence_len(&self) -> usize {
        let tests = self
            .paraphrase_test
            .iter()
            .chain(&self.reverse_test)
            .map(|t| t.prompt.len() + t.completion.len() + 1);
        self.train.iter().map(Vec::len).chain(tests).max().unwrap_or(0)
    }
}

/// A training sequence in which a reverse-test completion follows the
/// content it is queried from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Leak {
    pub fact: usize,
    pub sequence: usize,
}

fn find(hay: &[u32], needle: &[u32], from: usize) -> Option<usize> {
    if needle.is_empty() || hay.len() < needle.len() {
        return None;
    }
    (from..=hay.len() - needle.len()).find(|&i| hay[i..i + needle.len()] == *needle)
}

/// Scans every training sequence for each fact's reverse ordering: the
/// side that reverse prompts give appearing before the side they ask for.
pub fn scan_reverse_leaks(train: &[Vec<u32>], facts: &[Fact], task: TaskKind) -> Vec<Leak> {
    let mut leaks = Vec::new();
    for (si, seq) in train.iter().enumerate() {
        for f in facts {
            let (lead, follow) = match task {
                TaskKind::N2d | TaskKind::Translation => (&f.description, &f.name),
                TaskKind::D2n => (&f.name, &f.description),
            };
            let mut from = 0;
            while let Some(i) = find(seq, lead, from) {
                if find(seq, follow, i + lead.len()).is_some() {
                    leaks.push(Leak {
                        fact: f.id,
                        sequence: si,
                    });
                    break;
                }
                from = i + 1;
            }
        }
    }
    leaks
}

pub fn render_bundle(facts: Vec<Fact>, templates: &[Template], task: TaskKind, vocab: Vocab, test_items: usize) -> Result<DatasetBundle> {
    let trained = match task {
        TaskKind::N2d | TaskKind::Translation => Direction::NameFirst,
        TaskKind::D2n => Direction::DescriptionFirst,
    };
    let by_role = |role| templates.iter().filter(move |t| t.role == role);
    for role in [TemplateRole::Train, TemplateRole::ParaphraseTest, TemplateRole::ReverseTest] {
        if by_role(role).next().is_none() {
            return Err(Error::Dataset(format!("no {role:?} template")));
        }
    }
    for t in templates {
        let want_trained = t.role != TemplateRole::ReverseTest;
        if (t.direction()? == trained) != want_trained {
            return Err(Error::Dataset(format!("template {} renders the wrong ordering", t.id)));
        }
    }

    let mut train = Vec::with_capacity(facts.len() * by_role(TemplateRole::Train).count());
    for f in &facts {
        for t in by_role(TemplateRole::Train) {
            train.push(t.render(&vocab, f)?);
        }
    }
    let leaks = scan_reverse_leaks(&train, &facts, task);
    if let Some(l) = leaks.first() {
        return Err(Error::ReverseLeak(format!(
            "fact {} in training sequence {} ({} total)",
            l.fact,
            l.sequence,
            leaks.len()
        )));
    }

    let tested = &facts[..test_items.min(facts.len())];
    let render_tests = |role| -> Result<Vec<TestItem>> {
        let mut items = Vec::new();
        for f in tested {
            for t in by_role(role) {
                items.push(t.render_test(&vocab, f)?);
            }
        }
        Ok(items)
    };
    let paraphrase_test = render_tests(TemplateRole::ParaphraseTest)?;
    let reverse_test = render_tests(TemplateRole::ReverseTest)?;

    let train_set: HashSet<&[u32]> = train.iter().map(Vec::as_slice).collect();
    for item in &paraphrase_test {
        let mut full = item.prompt.clone();
        full.extend(&item.completion);
        full.push(item.stop);
        if train_set.contains(full.as_slice()) {
            return Err(Error::Dataset("a paraphrase test item appears verbatim in training".into()));
        }
    }

    Ok(DatasetBundle {
        task,
        vocab,
        facts,
        train,
        paraphrase_test,
        reverse_test,
        template_ids: templates.iter().map(|t| t.id.clone()).collect(),
    })
}

/// Random substream used for fact sampling.
pub const FACT_STREAM: &str = "facts";

/// Generates the full benchmark for `config` from `seed`.
pub fn generate_bundle(config: &DataConfig, seed: u64) -> Result<DatasetBundle> {
    let templates = templates(config.task);
    let pools = build_pools(config, &templates)?;
    let mut rng = RngStream::substream(seed, FACT_STREAM);
    let facts = generate_facts(config.n_facts, &pools.name, &pools.description, &mut rng)?;
    render_bundle(facts, &templates, config.task, pools.vocab, config.test_items)
}
