//! Text embedders used to place a corrupted rationale in the same space as
//! the rationale gallery.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::rng::{mix64, stable_hash};
use crate::text::normalize;

#[derive(Debug, thiserror::Error)]
pub enum EmbedError {
    #[error("embedder process: {0}")]
    Io(#[from] std::io::Error),
    #[error("embedder protocol: {0}")]
    Protocol(String),
    #[error("embedder returned {got} values, expected {expected}")]
    DimMismatch { expected: usize, got: usize },
}

pub trait TextEmbedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f32>, EmbedError>;
}

/// Seed used for the built-in embedder unless configured otherwise.
pub const DEFAULT_HASH_SEED: u64 = 0;

/// Deterministic bag-of-n-grams hashing embedder.
///
/// The text is normalized and split into alphanumeric tokens. Every unigram
/// and every adjacent bigram (joined by one space) is hashed with
/// `h = splitmix64(fnv1a(gram) ^ seed)`; it adds `+1` (top bit clear) or `-1`
/// (top bit set) at position `h % dim`. A vector that would be all zeros gets
/// `1.0` at position 0. Integer hashing only, so output is identical on every
/// platform.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashEmbedder {
    pub dim: usize,
    pub seed: u64,
}

impl HashEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "embedding dim must be positive");
        HashEmbedder { dim, seed }
    }

    pub fn embed_text(&self, text: &str) -> Vec<f32> {
        let norm = normalize(text);
        let tokens: Vec<&str> = norm
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .collect();
        let mut v = vec![0.0f32; self.dim];
        let mut add = |gram: &str| {
            let h = mix64(stable_hash(gram) ^ self.seed);
            let slot = (h % self.dim as u64) as usize;
            v[slot] += if h >> 63 == 0 { 1.0 } else { -1.0 };
        };
        for t in &tokens {
            add(t);
        }
        for w in tokens.windows(2) {
            add(&format!("{} {}", w[0], w[1]));
        }
        if v.iter().all(|&x| x == 0.0) {
            v[0] = 1.0;
        }
        v
    }
}

impl TextEmbedder for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>, EmbedError> {
        Ok(self.embed_text(text))
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    text: &'a str,
}

#[derive(Deserialize)]
struct EmbedResponse {
    vector: Vec<f32>,
}

/// Long-lived child process answering one `{"text": ..}` request line with
/// one `{"vector": [..]}` response line.
pub struct CommandEmbedder {
    dim: usize,
    io: Mutex<(ChildStdin, BufReader<ChildStdout>)>,
    child: Mutex<Child>,
}

impl CommandEmbedder {
    pub fn spawn(argv: &[String], dim: usize) -> Result<Self, EmbedError> {
        let (program, args) = argv
            .split_first()
            .ok_or_else(|| EmbedError::Protocol("empty command".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(CommandEmbedder {
            dim,
            io: Mutex::new((stdin, stdout)),
            child: Mutex::new(child),
        })
    }
}

impl TextEmbedder for CommandEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>, EmbedError> {
        let mut guard = self.io.lock().expect("embedder lock");
        let (stdin, stdout) = &mut *guard;
        let mut line = serde_json::to_string(&EmbedRequest { text })
            .map_err(|e| EmbedError::Protocol(e.to_string()))?;
        line.push('\n');
        stdin.write_all(line.as_bytes())?;
        stdin.flush()?;
        let mut reply = String::new();
        if stdout.read_line(&mut reply)? == 0 {
            return Err(EmbedError::Protocol("embedder closed its output".into()));
        }
        let resp: EmbedResponse =
            serde_json::from_str(&reply).map_err(|e| EmbedError::Protocol(e.to_string()))?;
        if resp.vector.len() != self.dim {
            return Err(EmbedError::DimMismatch {
                expected: self.dim,
                got: resp.vector.len(),
            });
        }
        Ok(resp.vector)
    }
}

impl Drop for CommandEmbedder {
    fn drop(&mut self) {
        if let Ok(mut child) = self.child.lock() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}
