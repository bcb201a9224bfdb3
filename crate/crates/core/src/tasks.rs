//! Synthetic prompted multi-task corpus, tokenizer, and exact-match metric.
//!
//! Six templated task families over a ~120-word vocabulary. Four train the
//! model; two are held out for zero-shot evaluation and are built as
//! compositions of skills the training tasks cover: negated polarity reuses
//! the polarity yes/no frame plus the answer-flipping "not" that membership
//! questions train, and comparison judgment reuses the successor rule from
//! sequence completion inside a yes/no verification frame.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub const PAD_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const UNK_ID: usize = 3;

pub const PAD_TOKEN: &str = "<pad>";
pub const EOS_TOKEN: &str = "<eos>";
pub const UNK_TOKEN: &str = "<unk>";

const CORPUS_HEADER: &str = "# semcom-corpus v1";

const FUNCTION_WORDS: &[&str] = &[
    "copy", "the", "words", ":", "repeat", "say", "this", "list", "is", "word", "positive",
    "or", "negative", "?", "classify", "as", "answer", "yes", "no", "does", "group", "contain",
    "not", "in", "what", "comes", "next", "after", "complete", "sequence", "number",
];

const POSITIVE_WORDS: &[&str] = &[
    "good", "great", "happy", "nice", "sweet", "bright", "kind", "warm", "safe", "calm",
];

const NEGATIVE_WORDS: &[&str] = &[
    "bad", "sad", "angry", "poor", "dark", "cold", "cruel", "wrong", "weak", "rough",
];

const ITEM_WORDS: &[&str] = &[
    "apple", "ball", "cat", "dog", "egg", "fish", "goat", "hat", "jar", "kite", "lamp", "moon",
];

const NUMBER_WORDS: &[&str] = &[
    "one", "two", "three", "four", "five", "six", "seven", "eight", "nine",
];

const EXTRA_WORDS: &[&str] = &[
    "ant", "bear", "bell", "bird", "boat", "book", "cake", "coin", "corn", "deer", "door",
    "drum", "fern", "flag", "fork", "frog", "gate", "gem", "hill", "horn", "iron", "king",
    "leaf", "map", "nest", "oak", "pear", "pond", "rain", "ring", "rock", "rose", "sand",
    "seed", "ship", "shoe", "snow", "star", "stone", "tree", "vine", "wave", "well", "wolf",
];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("integrity error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Bijective word <-> id map with reserved ids 1..=3.
pub struct Vocabulary {
    words: Vec<String>,
    ids: BTreeMap<String, usize>,
}

impl Vocabulary {
    /// The fixed vocabulary covering every template and word pool.
    pub fn standard() -> Vocabulary {
        let mut words = vec![
            PAD_TOKEN.to_string(),
            EOS_TOKEN.to_string(),
            UNK_TOKEN.to_string(),
        ];
        for pool in [
            FUNCTION_WORDS,
            POSITIVE_WORDS,
            NEGATIVE_WORDS,
            ITEM_WORDS,
            NUMBER_WORDS,
            EXTRA_WORDS,
        ] {
            words.extend(pool.iter().map(|w| w.to_string()));
        }
        let mut ids = BTreeMap::new();
        for (i, w) in words.iter().enumerate() {
            let clash = ids.insert(w.clone(), i + 1);
            assert!(clash.is_none(), "duplicate vocabulary word {w}");
        }
        Vocabulary { words, ids }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id_of(&self, word: &str) -> Option<usize> {
        self.ids.get(word).copied()
    }

    pub fn word_of(&self, id: usize) -> Option<&str> {
        self.words.get(id.checked_sub(1)?).map(|s| s.as_str())
    }

    /// Whitespace word-level tokenization; unknown words map to `<unk>`.
    pub fn tokenize(&self, text: &str) -> TokenSequence {
        let ids = text
            .split_whitespace()
            .map(|w| self.id_of(w).unwrap_or(UNK_ID))
            .collect();
        TokenSequence::new(ids, self.len())
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&id| self.word_of(id).unwrap_or(UNK_TOKEN))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Detokenizes a generated sequence, dropping the terminal `<eos>`.
    pub fn render_generation(&self, ids: &[usize]) -> String {
        let body: Vec<usize> = ids.iter().copied().filter(|&id| id != EOS_ID).collect();
        self.detokenize(&body)
    }
}

/// Validated token id sequence: ids in 1..=V, at most one terminal `<eos>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>, vocab_size: usize) -> TokenSequence {
        for (i, &id) in ids.iter().enumerate() {
            assert!(
                id >= 1 && id <= vocab_size,
                "token id {id} outside 1..={vocab_size}"
            );
            assert!(
                id != EOS_ID || i + 1 == ids.len(),
                "<eos> must be terminal when present"
            );
        }
        TokenSequence { ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    HeldOut,
}

/// The six synthetic task families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TaskId {
    PatternCopy,
    Polarity,
    Membership,
    SequenceCompletion,
    ComparisonJudgment,
    NegatedPolarity,
}

impl TaskId {
    pub const TRAIN: [TaskId; 4] = [
        TaskId::PatternCopy,
        TaskId::Polarity,
        TaskId::Membership,
        TaskId::SequenceCompletion,
    ];

    pub const HELD_OUT: [TaskId; 2] = [TaskId::ComparisonJudgment, TaskId::NegatedPolarity];

    pub const ALL: [TaskId; 6] = [
        TaskId::PatternCopy,
        TaskId::Polarity,
        TaskId::Membership,
        TaskId::SequenceCompletion,
        TaskId::ComparisonJudgment,
        TaskId::NegatedPolarity,
    ];

    pub fn split(&self) -> Split {
        match self {
            TaskId::ComparisonJudgment | TaskId::NegatedPolarity => Split::HeldOut,
            _ => Split::Train,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TaskId::PatternCopy => "pattern_copy",
            TaskId::Polarity => "polarity",
            TaskId::Membership => "membership",
            TaskId::SequenceCompletion => "sequence_completion",
            TaskId::ComparisonJudgment => "comparison_judgment",
            TaskId::NegatedPolarity => "negated_polarity",
        }
    }

    pub fn from_name(name: &str) -> Option<TaskId> {
        TaskId::ALL.iter().copied().find(|t| t.name() == name)
    }

    pub fn paraphrase_count(&self) -> usize {
        match self {
            TaskId::PatternCopy => 3,
            TaskId::Polarity => 4,
            TaskId::Membership => 4,
            TaskId::SequenceCompletion => 4,
            TaskId::ComparisonJudgment => 2,
            TaskId::NegatedPolarity => 2,
        }
    }

    /// Every target the task can emit, when the set is small and closed.
    pub fn answer_space(&self) -> Option<Vec<&'static str>> {
        match self {
            TaskId::PatternCopy => None,
            TaskId::Polarity => Some(vec!["positive", "negative", "yes", "no"]),
            TaskId::Membership | TaskId::ComparisonJudgment | TaskId::NegatedPolarity => {
                Some(vec!["yes", "no"])
            }
            TaskId::SequenceCompletion => Some(NUMBER_WORDS[2..].to_vec()),
        }
    }

    /// Expected accuracy of a uniform random policy over `answer_space`.
    pub fn chance_rate(&self) -> Option<f64> {
        self.answer_space().map(|a| 1.0 / a.len() as f64)
    }

    /// One (prompt, target) pair. Targets depend only on the sampled content,
    /// never on the chosen paraphrase.
    pub fn generate(&self, rng: &mut ChaCha8Rng) -> (String, String) {
        match self {
            TaskId::PatternCopy => {
                let content: Vec<&str> = (0..rng.gen_range(1..=3usize))
                    .map(|_| *pick(rng, &content_words()))
                    .collect();
                let list = content.join(" ");
                let prompt = match rng.gen_range(0..3u8) {
                    0 => format!("copy the words : {list}"),
                    1 => format!("repeat the words : {list}"),
                    _ => format!("say this list : {list}"),
                };
                (prompt, list)
            }
            TaskId::Polarity => {
                let positive = rng.gen_bool(0.5);
                let w = if positive {
                    *pick(rng, POSITIVE_WORDS)
                } else {
                    *pick(rng, NEGATIVE_WORDS)
                };
                match rng.gen_range(0..4u8) {
                    0 => (
                        format!("is the word {w} positive or negative ?"),
                        if positive { "positive" } else { "negative" }.into(),
                    ),
                    1 => (
                        format!("classify the word {w} as positive or negative"),
                        if positive { "positive" } else { "negative" }.into(),
                    ),
                    2 => (
                        format!("is the word {w} positive ? answer yes or no"),
                        if positive { "yes" } else { "no" }.into(),
                    ),
                    _ => (
                        format!("is the word {w} negative ? answer yes or no"),
                        if positive { "no" } else { "yes" }.into(),
                    ),
                }
            }
            TaskId::Membership => {
                let mut items = ITEM_WORDS.to_vec();
                for i in 0..3 {
                    let j = rng.gen_range(i..items.len());
                    items.swap(i, j);
                }
                let group = &items[..3];
                let inside = rng.gen_bool(0.5);
                let x = if inside {
                    group[rng.gen_range(0..3)]
                } else {
                    items[rng.gen_range(3..items.len())]
                };
                let g = group.join(" ");
                let (prompt, negated) = match rng.gen_range(0..4u8) {
                    0 => (
                        format!("does the group {g} contain {x} ? answer yes or no"),
                        false,
                    ),
                    1 => (
                        format!("is {x} in the group {g} ? answer yes or no"),
                        false,
                    ),
                    2 => (
                        format!("does the group {g} not contain {x} ? answer yes or no"),
                        true,
                    ),
                    _ => (
                        format!("is {x} not in the group {g} ? answer yes or no"),
                        true,
                    ),
                };
                let answer = if inside != negated { "yes" } else { "no" };
                (prompt, answer.into())
            }
            TaskId::SequenceCompletion => {
                let len = rng.gen_range(2..=4usize);
                let start = rng.gen_range(0..=(8 - len));
                let run = NUMBER_WORDS[start..start + len].join(" ");
                let next = NUMBER_WORDS[start + len];
                let prompt = match rng.gen_range(0..4u8) {
                    0 => format!("what comes next in the sequence {run} ?"),
                    1 => format!("complete the sequence {run}"),
                    2 => format!("what comes after {run} ?"),
                    _ => format!("what number comes next in the sequence {run} ?"),
                };
                (prompt, next.into())
            }
            TaskId::ComparisonJudgment => {
                let start = rng.gen_range(0..=5usize);
                let run = NUMBER_WORDS[start..start + 3].join(" ");
                let next = NUMBER_WORDS[start + 3];
                let truthy = rng.gen_bool(0.5);
                let x = if truthy {
                    next
                } else {
                    loop {
                        let cand = NUMBER_WORDS[rng.gen_range(0..NUMBER_WORDS.len())];
                        if cand != next {
                            break cand;
                        }
                    }
                };
                let prompt = match rng.gen_range(0..2u8) {
                    0 => format!("is {x} next in the sequence {run} ? answer yes or no"),
                    _ => format!("is {x} the next number in the sequence {run} ? answer yes or no"),
                };
                (prompt, if truthy { "yes" } else { "no" }.into())
            }
            TaskId::NegatedPolarity => {
                let positive = rng.gen_bool(0.5);
                let w = if positive {
                    *pick(rng, POSITIVE_WORDS)
                } else {
                    *pick(rng, NEGATIVE_WORDS)
                };
                let ask_positive = rng.gen_bool(0.5);
                let asked = if ask_positive { "positive" } else { "negative" };
                let prompt = format!("is the word {w} not {asked} ? answer yes or no");
                let answer = if positive != ask_positive { "yes" } else { "no" };
                (prompt, answer.into())
            }
        }
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn content_words() -> Vec<&'static str> {
    let mut v = Vec::new();
    v.extend_from_slice(ITEM_WORDS);
    v.extend_from_slice(POSITIVE_WORDS);
    v.extend_from_slice(NEGATIVE_WORDS);
    v.extend_from_slice(EXTRA_WORDS);
    v
}

fn pick<'a, T>(rng: &mut ChaCha8Rng, pool: &'a [T]) -> &'a T {
    &pool[rng.gen_range(0..pool.len())]
}

/// One prompted example: tokenized prompt and target plus the raw text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskSample {
    pub task: TaskId,
    pub prompt: TokenSequence,
    /// Target token ids, `<eos>`-terminated.
    pub target: TokenSequence,
    pub prompt_text: String,
    pub target_text: String,
}

impl TaskSample {
    fn build(vocab: &Vocabulary, task: TaskId, prompt_text: String, target_text: String) -> Self {
        let prompt = vocab.tokenize(&prompt_text);
        let mut target_ids = vocab.tokenize(&target_text).ids;
        target_ids.push(EOS_ID);
        TaskSample {
            task,
            prompt,
            target: TokenSequence::new(target_ids, vocab.len()),
            prompt_text,
            target_text,
        }
    }
}

/// Deterministic train/eval corpus over all task families.
pub struct Corpus {
    pub train: BTreeMap<TaskId, Vec<TaskSample>>,
    pub eval: BTreeMap<TaskId, Vec<TaskSample>>,
}

fn mix_seed(seed: u64, task_index: u64, split_tag: u64) -> u64 {
    let mut z = seed
        .wrapping_add(task_index.wrapping_mul(0x9e3779b97f4a7c15))
        .wrapping_add(split_tag.wrapping_mul(0xbf58476d1ce4e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Builds the corpus: `train_per_task` samples for each training task and
/// `eval_per_task` for every task. Held-out tasks contribute no training
/// samples. Fully determined by `seed`.
pub fn build_corpus(
    vocab: &Vocabulary,
    seed: u64,
    train_per_task: usize,
    eval_per_task: usize,
) -> Corpus {
    assert!(
        train_per_task > 0 && eval_per_task > 0,
        "corpus sizes must be positive"
    );
    let mut train = BTreeMap::new();
    let mut eval = BTreeMap::new();
    for (i, task) in TaskId::ALL.iter().enumerate() {
        if task.split() == Split::Train {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, i as u64, 0));
            let samples = (0..train_per_task)
                .map(|_| {
                    let (p, t) = task.generate(&mut rng);
                    TaskSample::build(vocab, *task, p, t)
                })
                .collect();
            train.insert(*task, samples);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, i as u64, 1));
        let samples = (0..eval_per_task)
            .map(|_| {
                let (p, t) = task.generate(&mut rng);
                TaskSample::build(vocab, *task, p, t)
            })
            .collect();
        eval.insert(*task, samples);
    }
    Corpus { train, eval }
}

impl Corpus {
    pub fn train_sample_count(&self) -> usize {
        self.train.values().map(Vec::len).sum()
    }

    /// Longest target (with `<eos>`) across both splits.
    pub fn max_target_len(&self) -> usize {
        self.train
            .values()
            .chain(self.eval.values())
            .flatten()
            .map(|s| s.target.len())
            .max()
            .unwrap_or(0)
    }

    /// Line-delimited key-value export, one record per sample.
    pub fn export<W: Write>(&self, mut w: W) -> Result<(), CorpusError> {
        writeln!(w, "{CORPUS_HEADER}")?;
        for (split, map) in [("train", &self.train), ("eval", &self.eval)] {
            for (task, samples) in map {
                for s in samples {
                    writeln!(
                        w,
                        "task={}\tsplit={split}\tprompt={}\ttarget={}",
                        task.name(),
                        s.prompt_text,
                        s.target_text
                    )?;
                }
            }
        }
        Ok(())
    }

    pub fn import<R: BufRead>(vocab: &Vocabulary, r: R) -> Result<Corpus, CorpusError> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| CorpusError::Format("empty corpus file".into()))??;
        if header != CORPUS_HEADER {
            return Err(CorpusError::Format(format!(
                "unsupported corpus header `{header}`"
            )));
        }
        let mut train: BTreeMap<TaskId, Vec<TaskSample>> = BTreeMap::new();
        let mut eval: BTreeMap<TaskId, Vec<TaskSample>> = BTreeMap::new();
        for (no, line) in lines.enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let mut task = None;
            let mut split = None;
            let mut prompt = None;
            let mut target = None;
            for field in line.split('\t') {
                let (key, value) = field.split_once('=').ok_or_else(|| {
                    CorpusError::Format(format!("line {}: field `{field}` lacks `=`", no + 2))
                })?;
                match key {
                    "task" => task = TaskId::from_name(value),
                    "split" => split = Some(value.to_string()),
                    "prompt" => prompt = Some(value.to_string()),
                    "target" => target = Some(value.to_string()),
                    other => {
                        return Err(CorpusError::Format(format!(
                            "line {}: unknown key `{other}`",
                            no + 2
                        )))
                    }
                }
            }
            let task = task
                .ok_or_else(|| CorpusError::Format(format!("line {}: missing task", no + 2)))?;
            let sample = TaskSample::build(
                vocab,
                task,
                prompt.ok_or_else(|| {
                    CorpusError::Format(format!("line {}: missing prompt", no + 2))
                })?,
                target.ok_or_else(|| {
                    CorpusError::Format(format!("line {}: missing target", no + 2))
                })?,
            );
            match split.as_deref() {
                Some("train") => train.entry(task).or_default().push(sample),
                Some("eval") => eval.entry(task).or_default().push(sample),
                other => {
                    return Err(CorpusError::Format(format!(
                        "line {}: bad split {other:?}",
                        no + 2
                    )))
                }
            }
        }
        Ok(Corpus { train, eval })
    }
}

/// 1 iff the two texts are byte-identical after trimming trailing
/// whitespace. Case-sensitive.
pub fn exact_match(generated: &str, target: &str) -> u32 {
    (generated.trim_end() == target.trim_end()) as u32
}

pub fn accuracy(pairs: impl IntoIterator<Item = (String, String)>) -> f64 {
    let mut hits = 0u64;
    let mut total = 0u64;
    for (g, t) in pairs {
        hits += exact_match(&g, &t) as u64;
        total += 1;
    }
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}
