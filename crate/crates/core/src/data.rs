//! Labeled frame sequences: loaders for the OCR letter file and ICDAR word
//! manifests, the naive character segmentation, and fold splitting.
//!
//! The canonical on-disk form of a [`Dataset`] is a whitespace-separated text
//! file:
//!
//! ```text
//! d K N
//! # alphabet 61 62 63 ...        (optional, hex code points)
//! word_id fold T                 (per sequence)
//! label_index bit bit ... bit    (T lines, d bits each)
//! ```
//!
//! A sequence without a fold tag is written with fold `-1`.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Number of pixel bits in one OCR letter (16 × 8).
pub const OCR_FRAME_DIM: usize = 128;
/// Normalized character height for word images.
pub const CHAR_ROWS: usize = 65;
/// Normalized character width for word images.
pub const CHAR_COLS: usize = 40;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelAlphabet {
    symbols: Vec<char>,
    index: HashMap<char, usize>,
}

impl LabelAlphabet {
    pub fn new(symbols: Vec<char>) -> Result<Self> {
        let mut index = HashMap::with_capacity(symbols.len());
        for (i, &c) in symbols.iter().enumerate() {
            if index.insert(c, i).is_some() {
                return Err(Error::Invalid(format!("duplicate glyph {c:?} in alphabet")));
            }
        }
        Ok(Self { symbols, index })
    }

    /// `a` through `z`.
    pub fn lowercase_latin() -> Self {
        Self::new(('a'..='z').collect()).expect("distinct glyphs")
    }

    /// Sorted set of every glyph used by `transcripts`.
    pub fn from_transcripts<'a>(transcripts: impl IntoIterator<Item = &'a str>) -> Self {
        let set: BTreeSet<char> = transcripts.into_iter().flat_map(|t| t.chars()).collect();
        Self::new(set.into_iter().collect()).expect("distinct glyphs")
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    pub fn index_of(&self, c: char) -> Result<usize> {
        self.index.get(&c).copied().ok_or(Error::UnknownGlyph(c))
    }

    pub fn glyph(&self, i: usize) -> Option<char> {
        self.symbols.get(i).copied()
    }

    pub fn encode(&self, s: &str) -> Result<Vec<usize>> {
        s.chars().map(|c| self.index_of(c)).collect()
    }

    /// Glyph string for a label sequence; out-of-range labels render as `?`.
    pub fn decode(&self, labels: &[usize]) -> String {
        labels
            .iter()
            .map(|&l| self.glyph(l).unwrap_or('?'))
            .collect()
    }

    /// Space-separated lowercase hex code points.
    pub fn to_hex(&self) -> String {
        self.symbols
            .iter()
            .map(|&c| format!("{:x}", c as u32))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn from_hex(s: &str) -> Result<Self> {
        let symbols = s
            .split_whitespace()
            .map(|tok| {
                u32::from_str_radix(tok, 16)
                    .ok()
                    .and_then(char::from_u32)
                    .ok_or_else(|| Error::Invalid(format!("bad glyph code point {tok:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(symbols)
    }
}

/// One word: binary frames and their labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledSequence {
    pub word_id: String,
    /// Fold tag carried by the source file, if any.
    pub fold: Option<usize>,
    pub frames: Vec<Vec<u8>>,
    pub labels: Vec<usize>,
}

impl LabeledSequence {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Frames widened to `f64` for the numeric models.
    pub fn frames_f64(&self) -> Vec<Vec<f64>> {
        self.frames
            .iter()
            .map(|f| f.iter().map(|&b| f64::from(b)).collect())
            .collect()
    }

    fn validate(&self, d: usize, k: usize) -> Result<()> {
        if self.frames.is_empty() || self.frames.len() != self.labels.len() {
            return Err(Error::Structure(format!(
                "word {}: {} frames vs {} labels",
                self.word_id,
                self.frames.len(),
                self.labels.len()
            )));
        }
        for f in &self.frames {
            if f.len() != d {
                return Err(Error::dim("frame", d, f.len()));
            }
            if f.iter().any(|&b| b > 1) {
                return Err(Error::Structure(format!(
                    "word {}: non-binary frame value",
                    self.word_id
                )));
            }
        }
        if let Some(&label) = self.labels.iter().find(|&&l| l >= k) {
            return Err(Error::LabelOutOfRange { label, k });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub sequences: Vec<LabeledSequence>,
    pub alphabet: LabelAlphabet,
    pub d: usize,
}

impl Dataset {
    pub fn new(sequences: Vec<LabeledSequence>, alphabet: LabelAlphabet, d: usize) -> Result<Self> {
        for s in &sequences {
            s.validate(d, alphabet.len())?;
        }
        Ok(Self {
            sequences,
            alphabet,
            d,
        })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn k(&self) -> usize {
        self.alphabet.len()
    }

    pub fn total_frames(&self) -> usize {
        self.sequences.iter().map(LabeledSequence::len).sum()
    }

    /// New dataset holding clones of the selected sequences.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            sequences: indices.iter().map(|&i| self.sequences[i].clone()).collect(),
            alphabet: self.alphabet.clone(),
            d: self.d,
        }
    }

    /// Canonical text serialization.
    pub fn to_canonical(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{} {} {}", self.d, self.k(), self.len()).unwrap();
        writeln!(out, "# alphabet {}", self.alphabet.to_hex()).unwrap();
        for s in &self.sequences {
            let fold = s.fold.map_or(-1, |f| f as i64);
            writeln!(out, "{} {} {}", s.word_id, fold, s.len()).unwrap();
            for (label, frame) in s.labels.iter().zip(&s.frames) {
                write!(out, "{label}").unwrap();
                for &b in frame {
                    out.push(' ');
                    out.push(if b == 0 { '0' } else { '1' });
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn parse_canonical(text: &str, origin: &str) -> Result<Dataset> {
        let err = |line: usize, msg: String| Error::Parse {
            path: origin.to_string(),
            line,
            msg,
        };
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l))
            .filter(|(_, l)| !l.trim().is_empty());

        let (ln, header) = lines.next().ok_or(Error::NoSequences)?;
        let nums = parse_usizes(header).map_err(|m| err(ln, m))?;
        let [d, k, n] = nums[..] else {
            return Err(err(ln, "header must be `d K N`".into()));
        };

        let mut alphabet = None;
        let mut sequences = Vec::with_capacity(n);
        let mut pending: Option<(usize, &str)> = None;
        while let Some((ln, line)) = pending.take().or_else(|| lines.next()) {
            if let Some(rest) = line.trim_start().strip_prefix('#') {
                if let Some(hex) = rest.trim_start().strip_prefix("alphabet") {
                    alphabet = Some(LabelAlphabet::from_hex(hex).map_err(|e| err(ln, e.to_string()))?);
                }
                continue;
            }
            let toks: Vec<&str> = line.split_whitespace().collect();
            let [word_id, fold, t] = toks[..] else {
                return Err(err(ln, "sequence header must be `word_id fold T`".into()));
            };
            let fold: i64 = fold.parse().map_err(|_| err(ln, format!("bad fold {fold:?}")))?;
            let t: usize = t.parse().map_err(|_| err(ln, format!("bad length {t:?}")))?;
            let mut frames = Vec::with_capacity(t);
            let mut labels = Vec::with_capacity(t);
            for _ in 0..t {
                let (ln, line) = lines
                    .next()
                    .ok_or_else(|| err(ln, format!("word {word_id}: truncated sequence")))?;
                let mut toks = line.split_whitespace();
                let label: usize = toks
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| err(ln, "missing label index".into()))?;
                let frame = toks
                    .map(|b| match b {
                        "0" => Ok(0u8),
                        "1" => Ok(1u8),
                        _ => Err(err(ln, format!("bad bit {b:?}"))),
                    })
                    .collect::<Result<Vec<u8>>>()?;
                if frame.len() != d {
                    return Err(err(ln, format!("expected {d} bits, got {}", frame.len())));
                }
                if label >= k {
                    return Err(err(ln, format!("label {label} out of range for K = {k}")));
                }
                frames.push(frame);
                labels.push(label);
            }
            sequences.push(LabeledSequence {
                word_id: word_id.to_string(),
                fold: usize::try_from(fold).ok(),
                frames,
                labels,
            });
        }
        if sequences.len() != n {
            return Err(Error::Structure(format!(
                "{origin}: header declares {n} sequences, found {}",
                sequences.len()
            )));
        }
        if sequences.is_empty() {
            return Err(Error::NoSequences);
        }
        let alphabet = match alphabet {
            Some(a) if a.len() == k => a,
            Some(a) => {
                return Err(Error::Structure(format!(
                    "{origin}: alphabet has {} glyphs but K = {k}",
                    a.len()
                )))
            }
            None => default_alphabet(k),
        };
        Dataset::new(sequences, alphabet, d)
    }

    pub fn read_canonical(path: impl AsRef<Path>) -> Result<Dataset> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_canonical(&text, &path.display().to_string())
    }

    pub fn write_canonical(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_canonical()).map_err(|e| Error::io(path, e))
    }
}

/// Alphabet used when a canonical file carries no glyph line: `a..z` when it
/// fits, otherwise code points starting at `A`.
fn default_alphabet(k: usize) -> LabelAlphabet {
    if k <= 26 {
        LabelAlphabet::new(('a'..='z').take(k).collect()).unwrap()
    } else {
        LabelAlphabet::new((0..k as u32).filter_map(|i| char::from_u32(0x41 + i)).collect())
            .unwrap()
    }
}

fn parse_usizes(line: &str) -> std::result::Result<Vec<usize>, String> {
    line.split_whitespace()
        .map(|t| t.parse().map_err(|_| format!("expected integer, got {t:?}")))
        .collect()
}

/// Loads either the OCR letter file or a canonical dataset file, chosen by the
/// shape of the first line.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let origin = path.display().to_string();
    let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    if first.split_whitespace().count() == 3 {
        Dataset::parse_canonical(&text, &origin)
    } else {
        parse_ocr(&text, &origin)
    }
}

pub fn load_ocr(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_ocr(&text, &path.display().to_string())
}

struct OcrChar {
    id: i64,
    next: i64,
    label: usize,
    fold: usize,
    bits: Vec<u8>,
}

/// Parses the tab-separated letter format:
/// `id letter next_id word_id position fold p_0 ... p_127`.
pub fn parse_ocr(text: &str, origin: &str) -> Result<Dataset> {
    let alphabet = LabelAlphabet::lowercase_latin();
    let err = |line: usize, msg: String| Error::Parse {
        path: origin.to_string(),
        line,
        msg,
    };

    // word id -> characters in file order; word order follows first appearance
    let mut words: Vec<(String, Vec<OcrChar>)> = Vec::new();
    let mut word_index: HashMap<String, usize> = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let ln = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').map(str::trim).filter(|f| !f.is_empty()).collect();
        if fields.len() != 6 + OCR_FRAME_DIM {
            return Err(err(
                ln,
                format!("expected {} fields, got {}", 6 + OCR_FRAME_DIM, fields.len()),
            ));
        }
        let int = |j: usize, name: &str| -> Result<i64> {
            fields[j]
                .parse::<i64>()
                .map_err(|_| err(ln, format!("bad {name} {:?}", fields[j])))
        };
        let id = int(0, "id")?;
        let mut glyph = fields[1].chars();
        let c = match (glyph.next(), glyph.next()) {
            (Some(c), None) => c,
            _ => return Err(err(ln, format!("bad letter {:?}", fields[1]))),
        };
        let label = alphabet.index_of(c)?;
        let next = int(2, "next id")?;
        let word_id = fields[3].to_string();
        int(4, "position")?;
        let fold = usize::try_from(int(5, "fold")?).map_err(|_| err(ln, "negative fold".into()))?;
        let bits = fields[6..]
            .iter()
            .map(|b| match *b {
                "0" => Ok(0u8),
                "1" => Ok(1u8),
                _ => Err(err(ln, format!("bad pixel {b:?}"))),
            })
            .collect::<Result<Vec<u8>>>()?;
        let w = *word_index.entry(word_id.clone()).or_insert_with(|| {
            words.push((word_id.clone(), Vec::new()));
            words.len() - 1
        });
        words[w].1.push(OcrChar {
            id,
            next,
            label,
            fold,
            bits,
        });
    }
    if words.is_empty() {
        return Err(Error::NoSequences);
    }

    let mut sequences = Vec::with_capacity(words.len());
    for (word_id, chars) in words {
        sequences.push(chain_word(&word_id, chars)?);
    }
    Dataset::new(sequences, alphabet, OCR_FRAME_DIM)
}

/// Orders the characters of one word by following next-id links from the one
/// character nothing points at.
fn chain_word(word_id: &str, chars: Vec<OcrChar>) -> Result<LabeledSequence> {
    let broken = |what: &str| Error::Structure(format!("word {word_id}: {what}"));
    let by_id: HashMap<i64, usize> = chars.iter().enumerate().map(|(i, c)| (c.id, i)).collect();
    if by_id.len() != chars.len() {
        return Err(broken("duplicate character id"));
    }
    let pointed: BTreeSet<i64> = chars.iter().map(|c| c.next).collect();
    let heads: Vec<usize> = (0..chars.len())
        .filter(|&i| !pointed.contains(&chars[i].id))
        .collect();
    let [mut cur] = heads[..] else {
        return Err(broken("next-id chain has no unique start"));
    };
    let fold = chars[cur].fold;
    let mut order = Vec::with_capacity(chars.len());
    loop {
        order.push(cur);
        if order.len() > chars.len() {
            return Err(broken("next-id chain has a cycle"));
        }
        let next = chars[cur].next;
        if next == -1 {
            break;
        }
        cur = *by_id
            .get(&next)
            .ok_or_else(|| broken(&format!("next id {next} not in word")))?;
    }
    if order.len() != chars.len() {
        return Err(broken("next-id chain does not cover every character"));
    }
    if order.iter().any(|&i| chars[i].fold != fold) {
        return Err(broken("characters disagree on fold"));
    }
    let mut chars: Vec<Option<OcrChar>> = chars.into_iter().map(Some).collect();
    let (frames, labels) = order
        .into_iter()
        .map(|i| {
            let c = chars[i].take().unwrap();
            (c.bits, c.label)
        })
        .unzip();
    Ok(LabeledSequence {
        word_id: word_id.to_string(),
        fold: Some(fold),
        frames,
        labels,
    })
}

/// Grayscale grid with intensities in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelGrid {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl PixelGrid {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Invalid(format!("empty {height}x{width} grid")));
        }
        if pixels.len() != height * width {
            return Err(Error::dim("pixel grid", height * width, pixels.len()));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let pixels = (0..height)
            .flat_map(|r| (0..width).map(move |c| (r, c)))
            .map(|(r, c)| f(r, c))
            .collect();
        Self::new(height, width, pixels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.pixels[r * self.width + c]
    }

    /// Columns `[start, start + width)` as a new grid.
    pub fn columns(&self, start: usize, width: usize) -> PixelGrid {
        let pixels = (0..self.height)
            .flat_map(|r| (start..start + width).map(move |c| (r, c)))
            .map(|(r, c)| self.get(r, c))
            .collect();
        PixelGrid {
            height: self.height,
            width,
            pixels,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WordImage {
    pub pixels: PixelGrid,
    pub transcript: String,
    /// Manifest entry the image came from.
    pub source: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IcdarReport {
    pub loaded: usize,
    pub skipped_empty_transcript: usize,
}

/// Reads a manifest of `relative-image-path<TAB>transcript` lines. Image paths
/// resolve against the manifest's directory.
pub fn load_icdar(manifest: impl AsRef<Path>) -> Result<(Vec<WordImage>, IcdarReport)> {
    let manifest = manifest.as_ref();
    let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let base = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut images = Vec::new();
    let mut report = IcdarReport::default();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (rel, transcript) = line.split_once('\t').ok_or_else(|| Error::Parse {
            path: manifest.display().to_string(),
            line: i + 1,
            msg: "expected `path<TAB>transcript`".into(),
        })?;
        if transcript.is_empty() {
            log::warn!("{}:{}: empty transcript for {rel}, skipped", manifest.display(), i + 1);
            report.skipped_empty_transcript += 1;
            continue;
        }
        let path: PathBuf = base.join(rel);
        let pixels = read_grayscale(&path)?;
        images.push(WordImage {
            pixels,
            transcript: transcript.to_string(),
            source: rel.to_string(),
        });
    }
    report.loaded = images.len();
    Ok((images, report))
}

fn read_grayscale(path: &Path) -> Result<PixelGrid> {
    let img = image::open(path)
        .map_err(|source| match source {
            image::ImageError::IoError(e) => Error::io(path, e),
            source => Error::Image {
                path: path.to_path_buf(),
                source,
            },
        })?
        .into_luma8();
    let (w, h) = img.dimensions();
    let pixels = img.pixels().map(|p| f64::from(p.0[0]) / 255.0).collect();
    PixelGrid::new(h as usize, w as usize, pixels)
}

/// Splits a word image into one equal-width vertical slice per transcript
/// character. Leftover columns go to the leftmost slices, one each.
pub fn segment_word_image(img: &WordImage) -> Result<Vec<PixelGrid>> {
    let n = img.transcript.chars().count();
    let width = img.pixels.width();
    if n == 0 {
        return Err(Error::Invalid("empty transcript".into()));
    }
    if width < n {
        return Err(Error::ImageTooNarrow { width, chars: n });
    }
    let (base, extra) = (width / n, width % n);
    let mut start = 0;
    Ok((0..n)
        .map(|i| {
            let w = base + usize::from(i < extra);
            let slice = img.pixels.columns(start, w);
            start += w;
            slice
        })
        .collect())
}

/// Nearest-neighbor resize to 65 × 40, threshold at 0.5, row-major flatten.
pub fn normalize_character(grid: &PixelGrid) -> Vec<u8> {
    let (h, w) = (grid.height(), grid.width());
    let mut out = Vec::with_capacity(CHAR_ROWS * CHAR_COLS);
    for r in 0..CHAR_ROWS {
        let sr = ((2 * r + 1) * h / (2 * CHAR_ROWS)).min(h - 1);
        for c in 0..CHAR_COLS {
            let sc = ((2 * c + 1) * w / (2 * CHAR_COLS)).min(w - 1);
            out.push(u8::from(grid.get(sr, sc) >= 0.5));
        }
    }
    out
}

/// Segments and normalizes every word image into a dataset over `alphabet`
/// (derived from the transcripts when `None`).
pub fn word_images_to_dataset(
    images: &[WordImage],
    alphabet: Option<LabelAlphabet>,
) -> Result<Dataset> {
    if images.is_empty() {
        return Err(Error::NoSequences);
    }
    let alphabet = alphabet
        .unwrap_or_else(|| LabelAlphabet::from_transcripts(images.iter().map(|w| w.transcript.as_str())));
    let sequences = images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let labels = alphabet.encode(&img.transcript)?;
            let frames = segment_word_image(img)?
                .iter()
                .map(normalize_character)
                .collect();
            Ok(LabeledSequence {
                word_id: format!("w{i}"),
                fold: None,
                frames,
                labels,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(sequences, alphabet, CHAR_ROWS * CHAR_COLS)
}

/// One cross-validation split: indices into the dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// `k` train/test partitions. When every sequence carries a fold tag the tags
/// define the test sets; otherwise a seeded shuffle is cut into `k` chunks
/// whose sizes differ by at most one (larger chunks first).
pub fn make_folds(ds: &Dataset, k: usize, seed: u64) -> Result<Vec<Fold>> {
    let n = ds.len();
    if k < 2 {
        return Err(Error::Invalid(format!("fold count must be at least 2, got {k}")));
    }
    if k > n {
        return Err(Error::Invalid(format!("{k} folds requested for {n} sequences")));
    }
    let assignment: Vec<usize> = if ds.sequences.iter().all(|s| s.fold.is_some()) {
        let tags: Vec<usize> = ds.sequences.iter().map(|s| s.fold.unwrap()).collect();
        if let Some(bad) = tags.iter().find(|&&f| f >= k) {
            return Err(Error::Invalid(format!("fold tag {bad} out of range for k = {k}")));
        }
        tags
    } else {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut assignment = vec![0; n];
        let (base, extra) = (n / k, n % k);
        let mut pos = 0;
        for f in 0..k {
            let size = base + usize::from(f < extra);
            for &i in &order[pos..pos + size] {
                assignment[i] = f;
            }
            pos += size;
        }
        assignment
    };
    Ok((0..k)
        .map(|f| {
            let (test, train) = (0..n).partition(|&i| assignment[i] == f);
            Fold { train, test }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ocr_line(id: i64, c: char, next: i64, word: &str, pos: usize, fold: usize, bits: &[u8]) -> String {
        let mut s = format!("{id}\t{c}\t{next}\t{word}\t{pos}\t{fold}");
        for b in bits {
            s.push_str(&format!("\t{b}"));
        }
        s.push('\t');
        s
    }

    fn bits(seed: usize) -> Vec<u8> {
        (0..OCR_FRAME_DIM).map(|i| u8::from((i * 7 + seed).is_multiple_of(5))).collect()
    }

    #[test]
    fn three_character_fixture() {
        let text = [
            ocr_line(1, 'c', 2, "1", 1, 3, &bits(0)),
            ocr_line(2, 'a', 3, "1", 2, 3, &bits(1)),
            ocr_line(3, 't', -1, "1", 3, 3, &bits(2)),
        ]
        .join("\n");
        let ds = parse_ocr(&text, "fixture").unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.d, 128);
        assert_eq!(ds.k(), 26);
        let s = &ds.sequences[0];
        assert_eq!(s.labels, vec![2, 0, 19]);
        assert_eq!(s.fold, Some(3));
        assert_eq!(s.frames, vec![bits(0), bits(1), bits(2)]);
    }

    #[test]
    fn chain_order_wins_over_file_order() {
        let text = [
            ocr_line(2, 'a', -1, "9", 2, 0, &bits(1)),
            ocr_line(1, 'b', 2, "9", 1, 0, &bits(0)),
        ]
        .join("\n");
        let ds = parse_ocr(&text, "fixture").unwrap();
        assert_eq!(ds.sequences[0].labels, vec![1, 0]);
    }

    #[test]
    fn ocr_errors() {
        assert!(matches!(parse_ocr("", "x"), Err(Error::NoSequences)));
        let short = "1\ta\t-1\t1\t1\t0\t1";
        assert!(matches!(parse_ocr(short, "x"), Err(Error::Parse { line: 1, .. })));
        let broken = [
            ocr_line(1, 'a', 5, "1", 1, 0, &bits(0)),
            ocr_line(2, 'b', -1, "1", 2, 0, &bits(0)),
        ]
        .join("\n");
        assert!(matches!(parse_ocr(&broken, "x"), Err(Error::Structure(_))));
        let glyph = ocr_line(1, 'Q', -1, "1", 1, 0, &bits(0));
        assert!(matches!(parse_ocr(&glyph, "x"), Err(Error::UnknownGlyph('Q'))));
    }

    #[test]
    fn canonical_round_trip() {
        let text = [
            ocr_line(1, 'c', 2, "1", 1, 3, &bits(0)),
            ocr_line(2, 'a', -1, "1", 2, 3, &bits(1)),
            ocr_line(3, 'z', -1, "2", 1, 1, &bits(4)),
        ]
        .join("\n");
        let ds = parse_ocr(&text, "fixture").unwrap();
        let canon = ds.to_canonical();
        let back = Dataset::parse_canonical(&canon, "canon").unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.to_canonical(), canon);
    }

    #[test]
    fn canonical_errors() {
        assert!(matches!(Dataset::parse_canonical("", "x"), Err(Error::NoSequences)));
        let bad = "2 2 1\nw 0 1\n0 1\n";
        assert!(matches!(Dataset::parse_canonical(bad, "x"), Err(Error::Parse { line: 3, .. })));
        let count = "2 2 2\nw 0 1\n0 1 0\n";
        assert!(matches!(Dataset::parse_canonical(count, "x"), Err(Error::Structure(_))));
    }

    fn word(width: usize, transcript: &str) -> WordImage {
        WordImage {
            pixels: PixelGrid::from_fn(3, width, |_, c| c as f64).unwrap(),
            transcript: transcript.into(),
            source: "test".into(),
        }
    }

    #[test]
    fn segmentation_widths() {
        let widths = |w, t| -> Vec<usize> {
            segment_word_image(&word(w, t)).unwrap().iter().map(PixelGrid::width).collect()
        };
        assert_eq!(widths(100, "abcd"), vec![25; 4]);
        assert_eq!(widths(10, "abc"), vec![4, 3, 3]);
        assert!(matches!(
            segment_word_image(&word(3, "abcde")),
            Err(Error::ImageTooNarrow { width: 3, chars: 5 })
        ));
    }

    #[test]
    fn segmentation_tiles_exhaustively() {
        for width in 1..=64 {
            for n in 1..=width {
                let transcript: String = "x".repeat(n);
                let img = word(width, &transcript);
                let slices = segment_word_image(&img).unwrap();
                assert_eq!(slices.len(), n);
                let sum: usize = slices.iter().map(PixelGrid::width).sum();
                assert_eq!(sum, width);
                let (min, max) = slices
                    .iter()
                    .map(PixelGrid::width)
                    .fold((usize::MAX, 0), |(a, b), w| (a.min(w), b.max(w)));
                assert!(max - min <= 1);
                // columns concatenate back to the source image
                let mut col = 0;
                for s in &slices {
                    for c in 0..s.width() {
                        assert_eq!(s.get(0, c), img.pixels.get(0, col));
                        col += 1;
                    }
                }
            }
        }
    }

    #[test]
    fn normalization_cases() {
        let zeros = PixelGrid::new(7, 3, vec![0.0; 21]).unwrap();
        let v = normalize_character(&zeros);
        assert_eq!(v.len(), 2600);
        assert!(v.iter().all(|&b| b == 0));

        let binary = PixelGrid::from_fn(65, 40, |r, c| ((r * 3 + c * 5) % 7 < 3) as u8 as f64).unwrap();
        let v = normalize_character(&binary);
        let expect: Vec<u8> = (0..65)
            .flat_map(|r| (0..40).map(move |c| ((r * 3 + c * 5) % 7 < 3) as u8))
            .collect();
        assert_eq!(v, expect);
    }

    fn toy(n: usize, tagged: bool) -> Dataset {
        let seqs = (0..n)
            .map(|i| LabeledSequence {
                word_id: format!("w{i}"),
                fold: tagged.then_some(i % 3),
                frames: vec![vec![0, 1]],
                labels: vec![0],
            })
            .collect();
        Dataset::new(seqs, LabelAlphabet::lowercase_latin(), 2).unwrap()
    }

    #[test]
    fn folds_follow_tags() {
        let folds = make_folds(&toy(9, true), 3, 0).unwrap();
        assert_eq!(folds[1].test, vec![1, 4, 7]);
        assert_eq!(folds[1].train, vec![0, 2, 3, 5, 6, 8]);
    }

    #[test]
    fn seeded_fold_sizes() {
        let sizes: Vec<usize> = make_folds(&toy(7, false), 5, 11)
            .unwrap()
            .iter()
            .map(|f| f.test.len())
            .collect();
        assert_eq!(sizes, vec![2, 2, 1, 1, 1]);
        let folds = make_folds(&toy(10, false), 10, 3).unwrap();
        assert!(folds.iter().all(|f| f.test.len() == 1 && f.train.len() == 9));
        assert!(make_folds(&toy(3, false), 4, 0).is_err());
        assert!(make_folds(&toy(3, false), 1, 0).is_err());
    }
}
