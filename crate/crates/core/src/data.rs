//! Synthetic string-transformation domains and composite planning tasks.
//!
//! Every example is a payload of 3 to 5 characters drawn from
//! `abcdefABCDEF0123456789`. A prompt is `<bos> payload =` and the target is
//! the transformed payload followed by `<eos>`. Payloads are assigned to the
//! train or eval split by an FNV-1a hash, so the split is a pure function of
//! the text and never depends on sampling order.

use serde::{Deserialize, Serialize};

use crate::tensor::Rng;
use crate::tokenizer::{encode, Token, BOS, EOS};

pub const PAYLOAD_ALPHABET: &[u8] = b"abcdefABCDEF0123456789";
pub const MIN_PAYLOAD: usize = 3;
pub const MAX_PAYLOAD: usize = 5;
pub const PROMPT_END: u8 = b'=';
/// Instruction slots in a planner subtask; shorter tasks are padded with `.`.
pub const PLAN_SLOTS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    /// Payload echoed twice.
    Copy,
    Reverse,
    /// Characters sorted by byte value.
    SortDigits,
    /// Each digit incremented modulo 10; letters pass through.
    ModAdd,
    Uppercase,
}

impl Domain {
    pub const ALL: [Domain; 5] =
        [Domain::Copy, Domain::Reverse, Domain::SortDigits, Domain::ModAdd, Domain::Uppercase];

    pub fn name(self) -> &'static str {
        match self {
            Domain::Copy => "copy",
            Domain::Reverse => "reverse",
            Domain::SortDigits => "sort_digits",
            Domain::ModAdd => "mod_add",
            Domain::Uppercase => "uppercase",
        }
    }

    pub fn parse(name: &str) -> Option<Domain> {
        Domain::ALL.into_iter().find(|d| d.name() == name)
    }

    pub fn index(self) -> usize {
        Domain::ALL.iter().position(|&d| d == self).unwrap()
    }

    /// Single-character instruction code used in planner subtasks.
    pub fn code(self) -> u8 {
        match self {
            Domain::Copy => b'k',
            Domain::Reverse => b'r',
            Domain::SortDigits => b's',
            Domain::ModAdd => b'm',
            Domain::Uppercase => b'u',
        }
    }

    pub fn apply(self, payload: &str) -> String {
        match self {
            Domain::Copy => format!("{payload}{payload}"),
            Domain::Reverse => payload.chars().rev().collect(),
            Domain::SortDigits => {
                let mut b = payload.as_bytes().to_vec();
                b.sort_unstable();
                String::from_utf8(b).expect("ascii payload")
            }
            Domain::ModAdd => payload
                .chars()
                .map(|c| match c.to_digit(10) {
                    Some(d) => char::from_digit((d + 1) % 10, 10).unwrap(),
                    None => c,
                })
                .collect(),
            Domain::Uppercase => payload.to_ascii_uppercase(),
        }
    }
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// One in ten keys lands in the eval split.
pub fn split_of(key: &str) -> Split {
    if fnv1a(key.as_bytes()) % 10 == 0 {
        Split::Eval
    } else {
        Split::Train
    }
}

fn payload_is_unambiguous(x: &str) -> bool {
    let outs: Vec<String> = Domain::ALL.iter().map(|d| d.apply(x)).collect();
    for i in 0..outs.len() {
        for j in i + 1..outs.len() {
            if outs[i] == outs[j] {
                return false;
            }
        }
    }
    // No domain may leave the payload unchanged.
    outs.iter().all(|o| o != x)
}

/// Draws a payload whose five domain outputs are pairwise distinct and differ
/// from the payload itself, so the domain is identifiable from any output.
pub fn sample_payload(rng: &mut Rng, split: Split) -> String {
    loop {
        let x = sample_any_payload(rng);
        if split_of(&x) == split {
            return x;
        }
    }
}

/// Like [`sample_payload`] without the split constraint.
pub fn sample_any_payload(rng: &mut Rng) -> String {
    loop {
        let n = rng.range_inclusive(MIN_PAYLOAD, MAX_PAYLOAD);
        let bytes: Vec<u8> =
            (0..n).map(|_| PAYLOAD_ALPHABET[rng.below(PAYLOAD_ALPHABET.len())]).collect();
        let x = String::from_utf8(bytes).unwrap();
        if payload_is_unambiguous(&x) {
            return x;
        }
    }
}

/// `<bos> input =`
pub fn prompt_tokens(input: &[Token]) -> Vec<Token> {
    let mut p = Vec::with_capacity(input.len() + 2);
    p.push(BOS);
    p.extend_from_slice(input);
    p.push(PROMPT_END as Token);
    p
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub prompt: Vec<Token>,
    pub target: Vec<Token>,
}

impl Example {
    pub fn new(domain: Domain, payload: &str) -> Self {
        let mut target = encode(&domain.apply(payload));
        target.push(EOS);
        Self { prompt: prompt_tokens(&encode(payload)), target }
    }

    /// Teacher-forced input, next-token targets and the loss mask.
    ///
    /// The input is `prompt ++ target[..-1]`; only positions that predict a
    /// target token are unmasked.
    pub fn teacher_forced(&self) -> (Vec<Token>, Vec<Token>, Vec<bool>) {
        let mut input = self.prompt.clone();
        input.extend_from_slice(&self.target[..self.target.len() - 1]);
        let mut targets = vec![0; input.len()];
        let mut mask = vec![false; input.len()];
        let start = self.prompt.len() - 1;
        for (j, &y) in self.target.iter().enumerate() {
            targets[start + j] = y;
            mask[start + j] = true;
        }
        (input, targets, mask)
    }
}

/// Seeded sampler for one domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticDomain {
    pub domain: Domain,
}

impl SyntheticDomain {
    pub fn new(domain: Domain) -> Self {
        Self { domain }
    }

    pub fn sample(&self, rng: &mut Rng, split: Split) -> Example {
        Example::new(self.domain, &sample_payload(rng, split))
    }

    pub fn batch(&self, rng: &mut Rng, split: Split, n: usize) -> Vec<Example> {
        (0..n).map(|_| self.sample(rng, split)).collect()
    }
}

/// A uniformly mixed example over all domains.
pub fn sample_mixed(rng: &mut Rng, split: Split) -> (Domain, Example) {
    let d = Domain::ALL[rng.below(Domain::ALL.len())];
    (d, SyntheticDomain::new(d).sample(rng, split))
}

/// A payload plus the ordered domains that must process it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompositeTask {
    pub payload: String,
    pub order: Vec<Domain>,
}

impl CompositeTask {
    /// All five single-domain tasks followed by the twenty ordered pairs.
    pub fn kinds() -> Vec<Vec<Domain>> {
        let mut kinds: Vec<Vec<Domain>> = Domain::ALL.iter().map(|&d| vec![d]).collect();
        for &a in &Domain::ALL {
            for &b in &Domain::ALL {
                if a != b {
                    kinds.push(vec![a, b]);
                }
            }
        }
        kinds
    }

    /// Domain codes padded with `.` to [`PLAN_SLOTS`].
    pub fn instruction(&self) -> Vec<Token> {
        let mut codes: Vec<Token> = self.order.iter().map(|d| d.code() as Token).collect();
        while codes.len() < PLAN_SLOTS {
            codes.push(b'.' as Token);
        }
        codes
    }

    /// Output after the first `steps` domains have run.
    pub fn carried_after(&self, steps: usize) -> String {
        self.order[..steps].iter().fold(self.payload.clone(), |x, d| d.apply(&x))
    }

    pub fn final_output(&self) -> String {
        self.carried_after(self.order.len())
    }

    /// Key used for the train/eval split.
    pub fn split_key(&self) -> String {
        let codes: String = self.order.iter().map(|d| d.code() as char).collect();
        format!("{codes}:{}", self.payload)
    }

    pub fn split(&self) -> Split {
        split_of(&self.split_key())
    }
}

/// Generates `n` composite tasks with uniformly drawn kinds, partitioned by hash.
pub fn composite_tasks(rng: &mut Rng, n: usize) -> (Vec<CompositeTask>, Vec<CompositeTask>) {
    let kinds = CompositeTask::kinds();
    let mut train = Vec::new();
    let mut eval = Vec::new();
    for i in 0..n {
        // Cycle kinds so every kind is equally represented.
        let order = kinds[i % kinds.len()].clone();
        let task = CompositeTask { payload: sample_any_payload(rng), order };
        match task.split() {
            Split::Train => train.push(task),
            Split::Eval => eval.push(task),
        }
    }
    (train, eval)
}
