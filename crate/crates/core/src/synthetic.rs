//! Seeded synthetic datasets with matching mock-provider score tables.

use std::collections::HashSet;
use std::fmt::Write as _;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{Dataset, LabelSchema, LabelVector, TaskMode, TextExample};

pub const COMPLEMENTARY_LABELS: [&str; 4] = ["world", "sports", "business", "tech"];

const CLASS_WORDS_PER_LABEL: usize = 6;
const FILLER_VOCAB: usize = 400;
const CLASS_WORDS_PER_TEXT: usize = 2;
const WORDS_PER_TEXT: usize = 6;

/// A four-class task where two signals each cover part of the data.
///
/// Row `i` has class `i % 4`. Rows with `(i / 4) % 5 < 3` form subset A
/// (60%): their texts contain words specific to their class. The rest form
/// subset B: filler words only. The mock scores are one-hot on the true class
/// for B and uniform for A, so text features and LLM scores are each blind
/// where the other sees. Rows with `(i / 20) % 5 == 4` are the test split;
/// both splits are class-balanced within each subset.
#[derive(Debug, Clone)]
pub struct Complementary {
    pub dataset: Dataset,
    pub in_subset_a: Vec<bool>,
    pub is_test: Vec<bool>,
    /// Mock provider scores per row.
    pub llm_scores: Vec<Vec<f64>>,
}

fn word(rng: &mut ChaCha8Rng, len: usize) -> String {
    (0..len).map(|_| rng.random_range(b'a'..=b'z') as char).collect()
}

fn vocabulary(rng: &mut ChaCha8Rng, n: usize, taken: &mut HashSet<String>) -> Vec<String> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let len = rng.random_range(5..=8);
        let w = word(rng, len);
        if taken.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

pub fn complementary(rows: usize, seed: u64) -> Complementary {
    let k = COMPLEMENTARY_LABELS.len();
    let schema = LabelSchema::new(COMPLEMENTARY_LABELS).expect("fixed labels are valid");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut taken = HashSet::new();
    let class_words: Vec<Vec<String>> = (0..k)
        .map(|_| vocabulary(&mut rng, CLASS_WORDS_PER_LABEL, &mut taken))
        .collect();
    let filler = vocabulary(&mut rng, FILLER_VOCAB, &mut taken);

    let mut seen = HashSet::new();
    let mut examples = Vec::with_capacity(rows);
    let mut in_subset_a = Vec::with_capacity(rows);
    let mut is_test = Vec::with_capacity(rows);
    let mut llm_scores = Vec::with_capacity(rows);
    for i in 0..rows {
        let class = i % k;
        let a = (i / 4) % 5 < 3;
        let text = loop {
            let mut words: Vec<&str> = Vec::with_capacity(WORDS_PER_TEXT);
            let n_class = if a { CLASS_WORDS_PER_TEXT } else { 0 };
            for _ in 0..n_class {
                words.push(class_words[class].choose(&mut rng).expect("non-empty"));
            }
            while words.len() < WORDS_PER_TEXT {
                words.push(filler.choose(&mut rng).expect("non-empty"));
            }
            words.shuffle(&mut rng);
            let text = words.join(" ");
            if seen.insert(text.clone()) {
                break text;
            }
        };
        examples.push(TextExample::labeled(text, LabelVector::one_hot(k, class)));
        in_subset_a.push(a);
        is_test.push((i / 20) % 5 == 4);
        llm_scores.push(if a {
            vec![1.0 / k as f64; k]
        } else {
            LabelVector::one_hot(k, class).to_f64()
        });
    }
    Complementary {
        dataset: Dataset::new(schema, TaskMode::MultiClass, examples),
        in_subset_a,
        is_test,
        llm_scores,
    }
}

impl Complementary {
    fn subset(&self, test: bool) -> Dataset {
        let rows = self
            .dataset
            .rows()
            .iter()
            .zip(&self.is_test)
            .filter(|(_, &t)| t == test)
            .map(|(r, _)| r.clone())
            .collect();
        Dataset::new(self.dataset.schema().clone(), self.dataset.mode(), rows)
    }

    pub fn train(&self) -> Dataset {
        self.subset(false)
    }

    pub fn test(&self) -> Dataset {
        self.subset(true)
    }

    /// Mock table covering every row.
    pub fn mock_table(&self) -> String {
        mock_table(self.dataset.texts().into_iter().zip(&self.llm_scores))
    }
}

/// Renders `text<TAB>s1<TAB>...` lines for the mock provider.
pub fn mock_table<'a, T, S>(rows: impl IntoIterator<Item = (T, S)>) -> String
where
    T: AsRef<str>,
    S: IntoIterator<Item = &'a f64>,
{
    let mut out = String::new();
    for (text, scores) in rows {
        out.push_str(text.as_ref());
        for s in scores {
            write!(out, "\t{s}").expect("writing to a String");
        }
        out.push('\n');
    }
    out
}

/// A small labeled set of short distinct texts, `n` rows over `k` classes
/// (row `i` has class `i % k`), with mock scores that are noisy but mostly
/// point at the right class.
pub fn toy(n: usize, k: usize, mode: TaskMode, seed: u64) -> (Dataset, Vec<Vec<f64>>) {
    let labels: Vec<String> = (0..k).map(|c| format!("label{c}")).collect();
    let schema = LabelSchema::new(labels).expect("generated labels are valid");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut taken = HashSet::new();
    let mut rows = Vec::with_capacity(n);
    let mut scores = Vec::with_capacity(n);
    for i in 0..n {
        let words = vocabulary(&mut rng, 3, &mut taken);
        let target = match mode {
            TaskMode::MultiClass => LabelVector::one_hot(k, i % k),
            TaskMode::MultiLabel => LabelVector::new((0..k).map(|c| c == i % k || rng.random_bool(0.3)).collect()),
        };
        scores.push(
            target
                .bits()
                .iter()
                .map(|&b| {
                    let noise: f64 = rng.random_range(0.0..0.3);
                    if b {
                        1.0 - noise
                    } else {
                        noise
                    }
                })
                .collect(),
        );
        rows.push(TextExample::labeled(words.join(" "), target));
    }
    (Dataset::new(schema, mode, rows), scores)
}
