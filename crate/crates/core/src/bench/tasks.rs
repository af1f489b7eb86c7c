//! Generated byte-level tasks in instruction/output form.
//!
//! Each task maps the last character of its instruction through a fixed
//! substitution table. Task alphabets are disjoint on both the input and the
//! output side, and each task has its own instruction prefix.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, BOS, EOS};

pub const TRAIN_SIZE: usize = 512;
pub const VAL_SIZE: usize = 64;
pub const TEST_SIZE: usize = 128;
const MAX_FILLER: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub instruction: String,
    pub output: String,
}

impl Sample {
    pub fn new(instruction: impl Into<String>, output: impl Into<String>) -> Self {
        Self {
            instruction: instruction.into(),
            output: output.into(),
        }
    }

    /// `[BOS] + instruction + output + [EOS]` and the index of the first
    /// answer token.
    pub fn teacher_forced(&self, cfg: &ModelConfig) -> Result<(Vec<u32>, usize)> {
        if self.output.is_empty() {
            return Err(Error::Input("sample has an empty output".into()));
        }
        if self.instruction.trim().is_empty() {
            return Err(Error::Input("sample has an empty instruction".into()));
        }
        let mut tokens = vec![BOS];
        tokens.extend(self.instruction.bytes().map(u32::from));
        let first = tokens.len();
        tokens.extend(self.output.bytes().map(u32::from));
        tokens.push(EOS);
        if tokens.len() > cfg.max_seq_len + 1 {
            return Err(Error::Input(format!(
                "sample needs {} tokens, max_seq_len is {}",
                tokens.len() - 1,
                cfg.max_seq_len
            )));
        }
        Ok((tokens, first))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn size(self) -> usize {
        match self {
            Split::Train => TRAIN_SIZE,
            Split::Val => VAL_SIZE,
            Split::Test => TEST_SIZE,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// A substitution task: `prefix + " " + filler + key` → `values[key]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskRule {
    pub name: &'static str,
    pub prefix: &'static str,
    pub keys: &'static str,
    pub values: &'static str,
}

pub const RULES: [TaskRule; 3] = [
    TaskRule {
        name: "upper",
        prefix: "up",
        keys: "abcdefghijklmnopqrstuvwxyz",
        values: "ABCDEFGHIJKLMNOPQRSTUVWXYZ",
    },
    TaskRule {
        name: "symbol",
        prefix: "sym",
        keys: "0123456789",
        values: "!@#$%^&*()",
    },
    TaskRule {
        name: "bracket",
        prefix: "br",
        keys: "<[{/`,;-",
        values: ">]}\\'.:_",
    },
];

impl TaskRule {
    pub fn by_name(name: &str) -> Result<&'static TaskRule> {
        RULES
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| Error::Input(format!("unknown task `{name}`")))
    }

    /// The reference answer for `instruction`, or `None` if it is not one of ours.
    pub fn apply(&self, instruction: &str) -> Option<String> {
        let body = instruction.strip_prefix(self.prefix)?.strip_prefix(' ')?;
        let key = body.chars().last()?;
        let pos = self.keys.chars().position(|c| c == key)?;
        self.values.chars().nth(pos).map(String::from)
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Sample {
        let keys: Vec<char> = self.keys.chars().collect();
        let filler: String = (0..rng.gen_range(0..=MAX_FILLER))
            .map(|_| keys[rng.gen_range(0..keys.len())])
            .collect();
        let k = rng.gen_range(0..keys.len());
        let instruction = format!("{} {filler}{}", self.prefix, keys[k]);
        let output = self.values.chars().nth(k).expect("tables align").to_string();
        Sample { instruction, output }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskDataset {
    pub name: String,
    pub split: Split,
    pub samples: Vec<Sample>,
}

impl TaskDataset {
    pub fn instructions(&self) -> Vec<&str> {
        self.samples.iter().map(|s| s.instruction.as_str()).collect()
    }

    /// One JSON object per line: `{"instruction": .., "output": ..}`.
    pub fn write_jsonl(&self, mut w: impl Write) -> Result<()> {
        for s in &self.samples {
            serde_json::to_writer(&mut w, s)?;
            w.write_all(b"\n").map_err(|e| Error::io("<jsonl>", e))?;
        }
        Ok(())
    }

    pub fn save_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf)?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load_jsonl(path: impl AsRef<Path>, name: &str, split: Split) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut samples = Vec::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let s: Sample = serde_json::from_str(&line)
                .map_err(|e| Error::Input(format!("{}:{}: {e}", path.display(), i + 1)))?;
            if s.output.is_empty() {
                return Err(Error::Input(format!("{}:{}: empty output", path.display(), i + 1)));
            }
            samples.push(s);
        }
        if samples.is_empty() {
            return Err(Error::Input(format!("{} has no samples", path.display())));
        }
        Ok(Self {
            name: name.to_owned(),
            split,
            samples,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Task {
    pub name: String,
    pub train: TaskDataset,
    pub val: TaskDataset,
    pub test: TaskDataset,
}

impl Task {
    pub fn split(&self, split: Split) -> &TaskDataset {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Writes `{dir}/{name}.{split}.jsonl` for every split.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        for split in Split::ALL {
            let path = dir.as_ref().join(format!("{}.{}.jsonl", self.name, split.as_str()));
            self.split(split).save_jsonl(path)?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>, name: &str) -> Result<Self> {
        let load = |split: Split| {
            let path = dir.as_ref().join(format!("{name}.{}.jsonl", split.as_str()));
            TaskDataset::load_jsonl(path, name, split)
        };
        Ok(Self {
            name: name.to_owned(),
            train: load(Split::Train)?,
            val: load(Split::Val)?,
            test: load(Split::Test)?,
        })
    }
}

fn split_seed(seed: u64, task: usize, split: Split) -> u64 {
    let s = match split {
        Split::Train => 1u64,
        Split::Val => 2,
        Split::Test => 3,
    };
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((task as u64 + 1) << 8 | s)
}

pub fn gen_task(rule: &TaskRule, index: usize, seed: u64) -> Task {
    let make = |split: Split| {
        let mut rng = ChaCha8Rng::seed_from_u64(split_seed(seed, index, split));
        TaskDataset {
            name: rule.name.to_owned(),
            split,
            samples: (0..split.size()).map(|_| rule.sample(&mut rng)).collect(),
        }
    };
    Task {
        name: rule.name.to_owned(),
        train: make(Split::Train),
        val: make(Split::Val),
        test: make(Split::Test),
    }
}

/// Every built-in task, in a fixed order.
pub fn gen_tasks(seed: u64) -> Vec<Task> {
    RULES.iter().enumerate().map(|(i, r)| gen_task(r, i, seed)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_generation() {
        let a = gen_tasks(5);
        let b = gen_tasks(5);
        assert_eq!(a, b);
        let mut ja = Vec::new();
        let mut jb = Vec::new();
        a[0].test.write_jsonl(&mut ja).unwrap();
        b[0].test.write_jsonl(&mut jb).unwrap();
        assert_eq!(ja, jb);
        assert_ne!(gen_tasks(6)[0].train, a[0].train);
    }

    #[test]
    fn sizes_and_rule_consistency() {
        for task in gen_tasks(1) {
            let rule = TaskRule::by_name(&task.name).unwrap();
            for split in Split::ALL {
                let d = task.split(split);
                assert_eq!(d.samples.len(), split.size());
                for s in &d.samples {
                    assert!(!s.output.is_empty());
                    assert_eq!(rule.apply(&s.instruction).as_deref(), Some(s.output.as_str()));
                }
            }
        }
    }

    #[test]
    fn prefix_identifies_task() {
        let tasks = gen_tasks(2);
        for (i, task) in tasks.iter().enumerate() {
            for s in &task.test.samples {
                let hits: Vec<usize> = RULES
                    .iter()
                    .enumerate()
                    .filter(|(_, r)| s.instruction.split(' ').next() == Some(r.prefix))
                    .map(|(j, _)| j)
                    .collect();
                assert_eq!(hits, vec![i]);
            }
        }
    }

    #[test]
    fn alphabets_disjoint() {
        for (i, a) in RULES.iter().enumerate() {
            for b in &RULES[i + 1..] {
                assert!(a.keys.chars().all(|c| !b.keys.contains(c)));
                assert!(a.values.chars().all(|c| !b.values.contains(c)));
            }
            assert_eq!(a.keys.chars().count(), a.values.chars().count());
        }
    }

    #[test]
    fn jsonl_roundtrip() {
        let t = &gen_tasks(3)[1];
        let dir = tempfile::tempdir().unwrap();
        t.save(dir.path()).unwrap();
        let back = Task::load(dir.path(), &t.name).unwrap();
        assert_eq!(&back, t);
        let line = std::fs::read_to_string(dir.path().join("symbol.val.jsonl")).unwrap();
        let first: serde_json::Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
        assert!(first.get("instruction").is_some() && first.get("output").is_some());
    }

    #[test]
    fn teacher_forcing_layout() {
        let cfg = ModelConfig::default();
        let (tokens, first) = Sample::new("up a", "A").teacher_forced(&cfg).unwrap();
        assert_eq!(tokens, vec![BOS, 117, 112, 32, 97, 65, EOS]);
        assert_eq!(first, 5);
        assert!(Sample::new("up a", "").teacher_forced(&cfg).is_err());
    }
}
