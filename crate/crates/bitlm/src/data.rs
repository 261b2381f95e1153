//! Corpus ingestion, byte-level tokenization, hash-based document-level
//! train/validation splitting, and deterministic batch streaming.

use std::collections::BTreeMap;
use std::path::Path;

use crate::model::Batch;
use crate::rng::Rng;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("validation fraction {0} must lie strictly between 0 and 1")]
    BadValFraction(f64),
    #[error("not enough training data: {0}")]
    InsufficientData(String),
    #[error("empty evaluation stream")]
    EmptyStream,
    #[error("i/o error reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// One corpus document: a stable id and raw bytes. Content is non-empty by
/// construction (loaders skip empty documents).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub id: u64,
    pub bytes: Vec<u8>,
}

/// Byte-level tokenization: one token per byte, id = byte value, V = 256.
/// No special tokens; the stream joins documents with a 0x00 separator.
pub fn tokenize_bytes(doc: &Document) -> Vec<u32> {
    doc.bytes.iter().map(|&b| u32::from(b)).collect()
}

pub fn detokenize_bytes(ids: &[u32]) -> Vec<u8> {
    ids.iter().map(|&t| t as u8).collect()
}

pub const SEPARATOR_TOKEN: u32 = 0;

/// Loads a corpus: a directory of plain-text files (one document per file,
/// filename order) or a single file with documents separated by blank lines.
/// Ids number the documents in that stable order; empty documents are
/// dropped.
pub fn load_corpus(path: &Path) -> Result<Vec<Document>, DataError> {
    let io_err = |source: std::io::Error| DataError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut docs = Vec::new();
    if path.is_dir() {
        let mut names: Vec<_> = std::fs::read_dir(path)
            .map_err(io_err)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file())
            .collect();
        names.sort();
        for file in names {
            let bytes = std::fs::read(&file).map_err(io_err)?;
            if !bytes.is_empty() {
                docs.push(Document { id: docs.len() as u64, bytes });
            }
        }
    } else {
        let text = std::fs::read(path).map_err(io_err)?;
        for chunk in split_blank_lines(&text) {
            if !chunk.is_empty() {
                docs.push(Document { id: docs.len() as u64, bytes: chunk });
            }
        }
    }
    if docs.is_empty() {
        return Err(DataError::EmptyCorpus);
    }
    Ok(docs)
}

/// Splits file bytes on blank lines (a newline followed by only whitespace
/// up to the next newline), trimming each document.
fn split_blank_lines(bytes: &[u8]) -> Vec<Vec<u8>> {
    let text = String::from_utf8_lossy(bytes);
    text.split("\n\n")
        .map(|chunk| chunk.trim_matches(['\n', '\r']).as_bytes().to_vec())
        .collect()
}

// ---------------------------------------------------------------------------
// Document-level split
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
}

/// Deterministic hash-based split: the assignment of a document is a pure
/// function of `(id, seed, val_fraction)`, independent of corpus order and
/// of every other document.
#[derive(Debug, Clone)]
pub struct SplitAssignment {
    pub val_fraction: f64,
    pub seed: u64,
    assignment: BTreeMap<u64, Split>,
}

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn assign_split(id: u64, seed: u64, val_fraction: f64) -> Split {
    let h = mix64(id ^ mix64(seed));
    let u = (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
    if u < val_fraction {
        Split::Validation
    } else {
        Split::Train
    }
}

pub fn split_documents(
    corpus: &[Document],
    val_fraction: f64,
    seed: u64,
) -> Result<SplitAssignment, DataError> {
    if corpus.is_empty() {
        return Err(DataError::EmptyCorpus);
    }
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(DataError::BadValFraction(val_fraction));
    }
    let assignment = corpus
        .iter()
        .map(|d| (d.id, assign_split(d.id, seed, val_fraction)))
        .collect();
    Ok(SplitAssignment { val_fraction, seed, assignment })
}

impl SplitAssignment {
    pub fn split_of(&self, id: u64) -> Option<Split> {
        self.assignment.get(&id).copied()
    }

    pub fn train_ids(&self) -> Vec<u64> {
        self.ids_in(Split::Train)
    }

    pub fn validation_ids(&self) -> Vec<u64> {
        self.ids_in(Split::Validation)
    }

    fn ids_in(&self, split: Split) -> Vec<u64> {
        self.assignment
            .iter()
            .filter(|(_, &s)| s == split)
            .map(|(&id, _)| id)
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Batch streaming
// ---------------------------------------------------------------------------

/// Infinite deterministic training stream. Each epoch shuffles document
/// order under a per-epoch stream of the data seed, concatenates the
/// documents with single 0x00 separators, and cuts the running token stream
/// into non-overlapping windows of `context_len + 1`; leftover tokens carry
/// into the next epoch, so every token position is emitted exactly once.
/// Targets are inputs shifted by one.
pub struct BatchStream {
    docs: Vec<Vec<u32>>,
    context_len: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    /// Positions of the current epoch's document order not yet consumed.
    order: Vec<usize>,
    next_doc: usize,
    carry: Vec<u32>,
}

impl BatchStream {
    pub fn new(
        docs: Vec<Vec<u32>>,
        context_len: usize,
        batch_size: usize,
        seed: u64,
    ) -> Result<Self, DataError> {
        assert!(context_len > 0 && batch_size > 0);
        if docs.is_empty() || docs.iter().all(|d| d.is_empty()) {
            return Err(DataError::InsufficientData("no training documents".into()));
        }
        let mut stream = BatchStream {
            docs,
            context_len,
            batch_size,
            seed,
            epoch: 0,
            order: Vec::new(),
            next_doc: 0,
            carry: Vec::new(),
        };
        stream.start_epoch(0);
        Ok(stream)
    }

    fn start_epoch(&mut self, epoch: u64) {
        self.epoch = epoch;
        self.order = (0..self.docs.len()).collect();
        let mut rng = Rng::stream(self.seed, &format!("data-order/{epoch}"));
        rng.shuffle(&mut self.order);
        self.next_doc = 0;
    }

    /// Tokens consumed per emitted window.
    pub fn window_len(&self) -> usize {
        self.context_len + 1
    }

    fn next_window(&mut self) -> Vec<u32> {
        let w = self.window_len();
        while self.carry.len() < w {
            if self.next_doc == self.order.len() {
                let epoch = self.epoch + 1;
                self.start_epoch(epoch);
            }
            let doc = &self.docs[self.order[self.next_doc]];
            self.carry.extend_from_slice(doc);
            self.carry.push(SEPARATOR_TOKEN);
            self.next_doc += 1;
        }
        let window: Vec<u32> = self.carry[..w].to_vec();
        self.carry.drain(..w);
        window
    }

    pub fn next_batch(&mut self) -> Batch {
        let t = self.context_len;
        let b = self.batch_size;
        let mut tokens = Vec::with_capacity(b * t);
        let mut targets = Vec::with_capacity(b * t);
        for _ in 0..b {
            let window = self.next_window();
            tokens.extend_from_slice(&window[..t]);
            targets.extend_from_slice(&window[1..]);
        }
        Batch { tokens, targets, batch_size: b, seq_len: t }
    }
}

/// Validation batches: the same chunking rule and context length as
/// training (documents in stable id order, single pass, no shuffle; the
/// trailing partial window is dropped).
pub fn validation_batches(
    docs: &[Vec<u32>],
    context_len: usize,
    batch_size: usize,
) -> Result<Vec<Batch>, DataError> {
    let w = context_len + 1;
    let mut stream = Vec::new();
    for doc in docs {
        stream.extend_from_slice(doc);
        stream.push(SEPARATOR_TOKEN);
    }
    let mut windows: Vec<&[u32]> = stream.chunks_exact(w).collect();
    if windows.is_empty() {
        return Err(DataError::EmptyStream);
    }
    let mut batches = Vec::new();
    for group in windows.chunks_mut(batch_size) {
        let b = group.len();
        let mut tokens = Vec::with_capacity(b * context_len);
        let mut targets = Vec::with_capacity(b * context_len);
        for window in group.iter() {
            tokens.extend_from_slice(&window[..context_len]);
            targets.extend_from_slice(&window[1..]);
        }
        batches.push(Batch { tokens, targets, batch_size: b, seq_len: context_len });
    }
    Ok(batches)
}

// ---------------------------------------------------------------------------
// Synthetic corpus
// ---------------------------------------------------------------------------

const WORDS: &[&str] = &[
    "the", "of", "and", "to", "in", "a", "is", "that", "for", "it", "as", "was", "with",
    "be", "by", "on", "not", "he", "this", "are", "or", "his", "from", "at", "which",
    "but", "have", "an", "had", "they", "you", "were", "their", "one", "all", "we",
    "can", "her", "has", "there", "been", "if", "more", "when", "will", "would", "who",
    "so", "no", "she", "other", "its", "may", "these", "what", "them", "than", "some",
    "him", "time", "into", "only", "could", "new", "then", "two", "first", "my", "now",
    "such", "like", "our", "over", "man", "me", "even", "most", "made", "after", "also",
    "did", "many", "before", "must", "through", "years", "where", "much", "your", "way",
    "well", "down", "should", "because", "each", "just", "those", "people", "how",
    "too", "little", "state", "good", "very", "make", "world", "still", "own", "see",
    "men", "work", "long", "get", "here", "between", "both", "life", "being", "under",
    "never", "day", "same", "another", "know", "while", "last", "might", "us", "great",
    "old", "year", "off", "come", "since", "against", "go", "came", "right", "used",
    "take", "three", "house", "water", "light", "story", "point", "every", "country",
    "small", "found", "night", "power", "city", "earth", "river", "stone", "winter",
    "summer", "garden", "window", "silver", "mountain", "village", "letter", "father",
    "mother", "child", "morning", "evening", "shadow", "silence", "voice", "question",
    "answer", "journey", "forest", "field", "ocean", "island", "bridge", "tower",
    "market", "harvest", "season", "flower", "branch", "spring", "autumn", "road",
    "path", "door", "room", "table", "paper", "book", "word", "language", "number",
    "music", "color", "glass", "iron", "gold", "cloud", "rain", "snow", "wind", "fire",
    "smoke", "ash", "salt", "bread", "wine", "ship", "sail", "anchor", "star", "moon",
    "sun", "sky", "bird", "horse", "wolf", "bear", "fish", "tree", "leaf", "root",
    "seed", "grain", "north", "south", "east", "west", "began", "thought", "turned",
    "walked", "looked", "asked", "told", "heard", "spoke", "stood", "waited", "opened",
    "closed", "carried", "followed", "remembered", "learned", "watched", "returned",
];

/// Deterministic pseudo-English corpus: Zipf-weighted words from a fixed
/// list, arranged into sentences, paragraphs, and documents. Used for the
/// desk-scale comparison protocol so the corpus ships as a generator rather
/// than a blob.
pub fn synthetic_corpus(total_bytes: usize, seed: u64) -> Vec<Document> {
    let mut rng = Rng::stream(seed, "synth-corpus");
    // Zipf-ish cumulative weights over the word list.
    let weights: Vec<f64> = (0..WORDS.len()).map(|r| 1.0 / (r as f64 + 2.7)).collect();
    let total_weight: f64 = weights.iter().sum();
    let pick_word = |rng: &mut Rng| -> &'static str {
        let mut dart = rng.next_f64() * total_weight;
        for (w, &wt) in WORDS.iter().zip(&weights) {
            dart -= wt;
            if dart <= 0.0 {
                return w;
            }
        }
        WORDS[WORDS.len() - 1]
    };

    let mut docs = Vec::new();
    let mut emitted = 0usize;
    while emitted < total_bytes {
        let paragraphs = 2 + rng.below(5) as usize;
        let mut doc = String::new();
        for p in 0..paragraphs {
            if p > 0 {
                doc.push('\n');
            }
            let sentences = 2 + rng.below(5) as usize;
            for s in 0..sentences {
                if s > 0 {
                    doc.push(' ');
                }
                let words = 4 + rng.below(11) as usize;
                for w in 0..words {
                    let word = pick_word(&mut rng);
                    if w == 0 {
                        let mut chars = word.chars();
                        if let Some(first) = chars.next() {
                            doc.extend(first.to_uppercase());
                            doc.push_str(chars.as_str());
                        }
                    } else {
                        doc.push(' ');
                        if rng.below(12) == 0 {
                            doc.pop();
                            doc.push_str(", ");
                        }
                        doc.push_str(word);
                    }
                }
                doc.push('.');
            }
        }
        emitted += doc.len() + 2;
        docs.push(Document { id: docs.len() as u64, bytes: doc.into_bytes() });
    }
    docs
}

/// Writes documents as a single blank-line-separated file, the inverse of
/// the single-file loader.
pub fn write_corpus_file(path: &Path, docs: &[Document]) -> std::io::Result<()> {
    let mut out = Vec::new();
    for (i, doc) in docs.iter().enumerate() {
        if i > 0 {
            out.extend_from_slice(b"\n\n");
        }
        out.extend_from_slice(&doc.bytes);
    }
    out.push(b'\n');
    std::fs::write(path, out)
}
