//! On-disk dataset layout: plain-text token files plus a TOML manifest that
//! records the generating configuration and a SHA-256 for every file.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{generate_bundle, DataConfig, DatasetBundle, TaskKind, TestItem, Vocab};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Counts {
    pub facts: usize,
    pub train: usize,
    pub paraphrase_test: usize,
    pub reverse_test: usize,
    pub vocab: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub seed: u64,
    pub task: TaskKind,
    pub template_ids: Vec<String>,
    pub counts: Counts,
    pub data: DataConfig,
    /// File name to hex SHA-256.
    pub files: BTreeMap<String, String>,
}

fn tests_text(vocab: &Vocab, items: &[TestItem]) -> String {
    items
        .iter()
        .map(|t| {
            format!(
                "{}\t{}\t{}\n",
                vocab.detokenize(&t.prompt),
                vocab.detokenize(&t.completion),
                vocab.token(t.stop)
            )
        })
        .collect()
}

/// File name to contents, in a fixed order.
pub fn render_files(bundle: &DatasetBundle) -> BTreeMap<String, String> {
    let v = &bundle.vocab;
    let mut files = BTreeMap::new();
    files.insert(
        "vocab.txt".to_string(),
        v.tokens().iter().map(|t| format!("{t}\n")).collect(),
    );
    files.insert(
        "train.txt".to_string(),
        bundle.train.iter().map(|s| v.detokenize(s) + "\n").collect(),
    );
    files.insert(
        "facts.tsv".to_string(),
        bundle
            .facts
            .iter()
            .map(|f| format!("{}\t{}\t{}\n", f.id, v.detokenize(&f.name), v.detokenize(&f.description)))
            .collect(),
    );
    files.insert("paraphrase_test.tsv".to_string(), tests_text(v, &bundle.paraphrase_test));
    files.insert("reverse_test.tsv".to_string(), tests_text(v, &bundle.reverse_test));
    files
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn manifest_for(bundle: &DatasetBundle, config: &DataConfig, seed: u64) -> DatasetManifest {
    DatasetManifest {
        format_version: DATASET_FORMAT_VERSION,
        seed,
        task: bundle.task,
        template_ids: bundle.template_ids.clone(),
        counts: Counts {
            facts: bundle.facts.len(),
            train: bundle.train.len(),
            paraphrase_test: bundle.paraphrase_test.len(),
            reverse_test: bundle.reverse_test.len(),
            vocab: bundle.vocab.len(),
        },
        data: config.clone(),
        files: render_files(bundle)
            .iter()
            .map(|(name, text)| (name.clone(), sha256_hex(text.as_bytes())))
            .collect(),
    }
}

/// Writes every dataset file and the manifest into `dir`.
pub fn write_dataset(bundle: &DatasetBundle, config: &DataConfig, seed: u64, dir: &Path) -> Result<DatasetManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, text) in render_files(bundle) {
        let path = dir.join(&name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    let manifest = manifest_for(bundle, config, seed);
    let path = dir.join(MANIFEST_FILE);
    let text = toml::to_string_pretty(&manifest).map_err(|e| Error::Dataset(format!("manifest: {e}")))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))
}

/// Regenerates the bundle a manifest describes and checks it against the
/// recorded hashes. Returns the names of files whose contents differ.
pub fn verify_regeneration(manifest: &DatasetManifest) -> Result<Vec<String>> {
    let bundle = generate_bundle(&manifest.data, manifest.seed)?;
    let fresh = manifest_for(&bundle, &manifest.data, manifest.seed);
    let mut mismatched: Vec<String> = manifest
        .files
        .iter()
        .filter(|(name, hash)| fresh.files.get(*name) != Some(hash))
        .map(|(name, _)| name.clone())
        .collect();
    mismatched.extend(fresh.files.keys().filter(|k| !manifest.files.contains_key(*k)).cloned());
    Ok(mismatched)
}

/// Checks that the files in `dir` still match their manifest hashes.
pub fn verify_files(dir: &Path) -> Result<Vec<String>> {
    let manifest = read_manifest(&dir.join(MANIFEST_FILE))?;
    let mut bad = Vec::new();
    for (name, hash) in &manifest.files {
        let path = dir.join(name);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if &sha256_hex(&bytes) != hash {
            bad.push(name.clone());
        }
    }
    Ok(bad)
}

pub fn read_vocab(path: &Path) -> Result<Vocab> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let words: Vec<&str> = text.lines().collect();
    if words.len() < 4 || words[..4] != super::vocab::RESERVED {
        return Err(Error::Dataset(format!("{}: missing reserved tokens", path.display())));
    }
    Vocab::new(words[4..].iter().copied())
}

pub fn read_sequences(path: &Path, vocab: &Vocab) -> Result<Vec<Vec<u32>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(|l| vocab.tokenize(l)).collect())
}

pub fn read_tests(path: &Path, vocab: &Vocab) -> Result<Vec<TestItem>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            let cols: Vec<&str> = line.split('\t').collect();
            match cols.as_slice() {
                [p, c, s] => Ok(TestItem {
                    prompt: vocab.tokenize(p),
                    completion: vocab.tokenize(c),
                    stop: vocab.id(s).ok_or_else(|| {
                        Error::Dataset(format!("{}:{}: unknown stop token {s:?}", path.display(), i + 1))
                    })?,
                }),
                _ => Err(Error::Dataset(format!(
                    "{}:{}: expected 3 tab-separated columns",
                    path.display(),
                    i + 1
                ))),
            }
        })
        .collect()
}
