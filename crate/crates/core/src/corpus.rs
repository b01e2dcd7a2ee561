//! Distractor-function corpus: ingestion, length-percentile filtering and
//! seeded sampling.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed record at line {line}: {detail}")]
    Malformed { line: usize, detail: String },
    #[error("duplicate id {id:?} at line {line}")]
    DuplicateId { id: String, line: usize },
    #[error("zero usable entries")]
    Empty,
    #[error("cannot sample {n} distractors from an empty corpus")]
    EmptySample { n: usize },
}

/// Counts tokens in a piece of source text.
///
/// Only relative lengths matter for granularity, so the default
/// [`SimpleTokenizer`] is a cheap scanner. A real model tokenizer can be
/// plugged in through this trait.
pub trait TokenEstimator: Send + Sync {
    fn count(&self, text: &str) -> usize;

    /// Byte offset just past the first `max_tokens` tokens of `text`.
    fn prefix_end(&self, text: &str, max_tokens: usize) -> usize;
}

/// Runs of alphanumerics/underscore count as one token, every other
/// non-whitespace character counts as one token.
#[derive(Debug, Clone, Copy, Default)]
pub struct SimpleTokenizer;

impl SimpleTokenizer {
    fn scan(text: &str, mut on_token: impl FnMut(usize) -> bool) {
        let mut in_word = false;
        for (i, ch) in text.char_indices() {
            let word = ch.is_alphanumeric() || ch == '_';
            if word && in_word {
                continue;
            }
            in_word = word;
            if ch.is_whitespace() {
                continue;
            }
            if !on_token(i) {
                return;
            }
        }
    }
}

impl TokenEstimator for SimpleTokenizer {
    fn count(&self, text: &str) -> usize {
        let mut n = 0;
        Self::scan(text, |_| {
            n += 1;
            true
        });
        n
    }

    fn prefix_end(&self, text: &str, max_tokens: usize) -> usize {
        let mut seen = 0;
        let mut end = text.len();
        Self::scan(text, |start| {
            if seen == max_tokens {
                end = start;
                return false;
            }
            seen += 1;
            true
        });
        end
    }
}

/// Token count under the default estimator.
pub fn estimate_tokens(text: &str) -> usize {
    SimpleTokenizer.count(text)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistractorFunction {
    pub id: String,
    pub source: String,
    pub char_count: usize,
    pub token_estimate: usize,
}

impl DistractorFunction {
    pub fn new(id: impl Into<String>, source: impl Into<String>) -> Self {
        let source = source.into();
        let char_count = source.chars().count();
        let token_estimate = estimate_tokens(&source).max(1);
        Self {
            id: id.into(),
            source,
            char_count,
            token_estimate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusFormat {
    Jsonl,
    Dir,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Corpus {
    pub entries: Vec<DistractorFunction>,
    pub p25: usize,
    pub p75: usize,
}

/// Nearest-rank percentile: the value at 1-based rank `ceil(p * n)`.
pub fn nearest_rank(sorted: &[usize], p: f64) -> usize {
    assert!(!sorted.is_empty());
    let rank = ((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

#[derive(Deserialize)]
struct JsonlRecord {
    id: Option<String>,
    source: Option<String>,
}

impl Corpus {
    /// Build a corpus and compute its percentile bounds.
    pub fn from_entries(entries: Vec<DistractorFunction>) -> Result<Self, CorpusError> {
        if entries.is_empty() {
            return Err(CorpusError::Empty);
        }
        let mut seen = HashSet::new();
        for (i, e) in entries.iter().enumerate() {
            if !seen.insert(e.id.as_str()) {
                return Err(CorpusError::DuplicateId {
                    id: e.id.clone(),
                    line: i + 1,
                });
            }
        }
        let mut counts: Vec<usize> = entries.iter().map(|e| e.char_count).collect();
        counts.sort_unstable();
        Ok(Self {
            p25: nearest_rank(&counts, 0.25),
            p75: nearest_rank(&counts, 0.75),
            entries,
        })
    }

    pub fn ingest(path: &Path, format: CorpusFormat) -> Result<Self, CorpusError> {
        match format {
            CorpusFormat::Jsonl => Self::ingest_jsonl(path),
            CorpusFormat::Dir => Self::ingest_dir(path),
        }
    }

    fn ingest_jsonl(path: &Path) -> Result<Self, CorpusError> {
        let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let rec: JsonlRecord =
                serde_json::from_str(line).map_err(|e| CorpusError::Malformed {
                    line: line_no,
                    detail: e.to_string(),
                })?;
            let id = rec.id.ok_or_else(|| CorpusError::Malformed {
                line: line_no,
                detail: "missing field `id`".into(),
            })?;
            let source = rec.source.ok_or_else(|| CorpusError::Malformed {
                line: line_no,
                detail: format!("record {id:?}: missing field `source`"),
            })?;
            if source.is_empty() {
                return Err(CorpusError::Malformed {
                    line: line_no,
                    detail: format!("record {id:?}: empty source"),
                });
            }
            entries.push(DistractorFunction::new(id, source));
        }
        Self::from_entries(entries)
    }

    fn ingest_dir(root: &Path) -> Result<Self, CorpusError> {
        let io_err = |source: std::io::Error| CorpusError::Io {
            path: root.display().to_string(),
            source,
        };
        let mut entries = Vec::new();
        let walker = walkdir::WalkDir::new(root).sort_by_file_name();
        for dent in walker {
            let dent = dent.map_err(|e| io_err(e.into()))?;
            let path = dent.path();
            let wanted = matches!(
                path.extension().and_then(|e| e.to_str()),
                Some("py") | Some("txt")
            );
            if !dent.file_type().is_file() || !wanted {
                continue;
            }
            let source = fs::read_to_string(path).map_err(io_err)?;
            if source.trim().is_empty() {
                continue;
            }
            let id = path
                .strip_prefix(root)
                .unwrap_or(path)
                .to_string_lossy()
                .replace('\\', "/");
            entries.push(DistractorFunction::new(id, source));
        }
        Self::from_entries(entries)
    }

    /// Keep entries with `p25 <= char_count <= p75`, in order.
    pub fn filter_by_percentile(&self) -> Corpus {
        Corpus {
            entries: self
                .entries
                .iter()
                .filter(|e| (self.p25..=self.p75).contains(&e.char_count))
                .cloned()
                .collect(),
            p25: self.p25,
            p75: self.p75,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn mean_tokens(&self) -> f64 {
        if self.entries.is_empty() {
            return 0.0;
        }
        let total: usize = self.entries.iter().map(|e| e.token_estimate).sum();
        total as f64 / self.entries.len() as f64
    }

    /// Draw `n` distractors. Without replacement when the corpus is large
    /// enough, otherwise with replacement (reported in the result).
    pub fn sample_distractors(&self, n: usize, seed: u64) -> Result<DistractorSample, CorpusError> {
        if n == 0 {
            return Ok(DistractorSample::default());
        }
        if self.entries.is_empty() {
            return Err(CorpusError::EmptySample { n });
        }
        let mut rng = seed::rng(seed);
        let len = self.entries.len();
        let (picks, with_replacement) = if len >= n {
            (index::sample(&mut rng, len, n).into_vec(), false)
        } else {
            ((0..n).map(|_| rng.gen_range(0..len)).collect(), true)
        };
        Ok(DistractorSample {
            functions: picks.into_iter().map(|i| self.entries[i].clone()).collect(),
            with_replacement,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DistractorSample {
    pub functions: Vec<DistractorFunction>,
    pub with_replacement: bool,
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn corpus_of(counts: &[usize]) -> Corpus {
        let entries = counts
            .iter()
            .enumerate()
            .map(|(i, &c)| DistractorFunction::new(format!("f{i}"), "x".repeat(c)))
            .collect();
        Corpus::from_entries(entries).unwrap()
    }

    #[test]
    fn nearest_rank_percentiles() {
        let c = corpus_of(&[40, 10, 30, 20]);
        assert_eq!((c.p25, c.p75), (10, 30));
    }

    #[test]
    fn filter_keeps_inclusive_band_in_order() {
        let c = corpus_of(&[10, 20, 30, 40]);
        let kept: Vec<_> = c.filter_by_percentile().entries.iter().map(|e| e.char_count).collect();
        assert_eq!(kept, vec![10, 20, 30]);
        let same = corpus_of(&[7; 9]).filter_by_percentile();
        assert_eq!(same.len(), 9);
    }

    #[test]
    fn filter_is_idempotent() {
        let c = corpus_of(&[3, 9, 1, 55, 23, 8, 8, 100, 41]).filter_by_percentile();
        assert_eq!(c.filter_by_percentile().entries, c.entries);
    }

    #[test]
    fn uniform_lengths_keep_about_half() {
        let mut rng = seed::rng(11);
        let counts: Vec<usize> = (0..10_000).map(|_| rng.gen_range(1..=1000)).collect();
        let c = corpus_of(&counts);
        let frac = c.filter_by_percentile().len() as f64 / counts.len() as f64;
        assert!((frac - 0.5).abs() <= 0.05, "retained {frac}");
    }

    #[test]
    fn token_rule() {
        assert_eq!(estimate_tokens(""), 0);
        assert_eq!(estimate_tokens("def f(x):"), 6);
        assert_eq!(estimate_tokens("arr[3] = x - 74"), 8);
        assert_eq!(estimate_tokens("  \n\t"), 0);
    }

    #[test]
    fn prefix_end_cuts_after_n_tokens() {
        let t = SimpleTokenizer;
        let s = "def f(x):\n    return x";
        assert_eq!(&s[..t.prefix_end(s, 2)], "def f");
        assert_eq!(t.prefix_end(s, 0), 0);
        assert_eq!(t.prefix_end(s, 100), s.len());
        assert_eq!(t.count(&s[..t.prefix_end(s, 5)]), 5);
    }

    #[test]
    fn sampling_contract() {
        let c = corpus_of(&(1..=50).collect::<Vec<_>>());
        assert!(c.sample_distractors(0, 1).unwrap().functions.is_empty());
        let a = c.sample_distractors(20, 9).unwrap();
        let b = c.sample_distractors(20, 9).unwrap();
        assert_eq!(a, b);
        let ids: HashSet<_> = a.functions.iter().map(|f| &f.id).collect();
        assert_eq!(ids.len(), 20);
        assert!(!a.with_replacement);

        let big = c.sample_distractors(80, 9).unwrap();
        assert_eq!(big.functions.len(), 80);
        assert!(big.with_replacement);

        let distinct: HashSet<Vec<String>> = (0..1000)
            .map(|s| {
                c.sample_distractors(5, s)
                    .unwrap()
                    .functions
                    .into_iter()
                    .map(|f| f.id)
                    .collect()
            })
            .collect();
        assert!(distinct.len() >= 2);
    }

    #[test]
    fn empty_corpus_cannot_sample() {
        let c = Corpus {
            entries: vec![],
            p25: 0,
            p75: 0,
        };
        assert!(matches!(c.sample_distractors(3, 0), Err(CorpusError::EmptySample { n: 3 })));
    }

    #[test]
    fn jsonl_errors() {
        let dir = tempfile::tempdir().unwrap();
        let empty = dir.path().join("empty.jsonl");
        fs::write(&empty, "").unwrap();
        assert!(matches!(
            Corpus::ingest(&empty, CorpusFormat::Jsonl),
            Err(CorpusError::Empty)
        ));

        let bad = dir.path().join("bad.jsonl");
        let mut f = fs::File::create(&bad).unwrap();
        writeln!(f, r#"{{"id": "a", "source": "def a(): pass"}}"#).unwrap();
        writeln!(f, r#"{{"id": "b"}}"#).unwrap();
        let err = Corpus::ingest(&bad, CorpusFormat::Jsonl).unwrap_err();
        match err {
            CorpusError::Malformed { line, detail } => {
                assert_eq!(line, 2);
                assert!(detail.contains("\"b\""), "{detail}");
            }
            other => panic!("unexpected {other:?}"),
        }

        let dup = dir.path().join("dup.jsonl");
        fs::write(
            &dup,
            "{\"id\":\"a\",\"source\":\"x\"}\n{\"id\":\"a\",\"source\":\"y\"}\n",
        )
        .unwrap();
        assert!(matches!(
            Corpus::ingest(&dup, CorpusFormat::Jsonl),
            Err(CorpusError::DuplicateId { .. })
        ));
    }

    #[test]
    fn directory_loader_uses_relative_ids() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("pkg")).unwrap();
        fs::write(dir.path().join("pkg/a.py"), "def a():\n    return 1\n").unwrap();
        fs::write(dir.path().join("b.txt"), "def b():\n    return 2\n").unwrap();
        fs::write(dir.path().join("ignored.md"), "# nope").unwrap();
        let c = Corpus::ingest(dir.path(), CorpusFormat::Dir).unwrap();
        let ids: Vec<_> = c.entries.iter().map(|e| e.id.as_str()).collect();
        assert_eq!(ids, vec!["b.txt", "pkg/a.py"]);
    }
}
