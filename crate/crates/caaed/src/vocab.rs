//! Output-unit inventories and tokenization.
//!
//! Three inventory kinds share one representation: plain characters,
//! word pieces grown by merging frequent adjacent pairs, and mixed units
//! (frequent whole words plus multi-character leftovers from decomposing
//! infrequent words). Every unit carries its character decomposition so an
//! embedding can be composed from characters; the four special tokens are
//! atomic and decompose to themselves.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const SOS: &str = "<sos>";
pub const EOS: &str = "<eos>";
pub const SPACE: &str = "<space>";
pub const UNK: &str = "<unk>";

/// The fixed character alphabet: the four atomic specials, apostrophe, a-z.
fn char_alphabet() -> Vec<String> {
    let mut inv: Vec<String> = [SOS, EOS, SPACE, UNK, "'"].iter().map(|s| s.to_string()).collect();
    inv.extend(('a'..='z').map(|c| c.to_string()));
    inv
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VocabKind {
    Character,
    WordPiece,
    MixedUnit,
}

impl VocabKind {
    pub fn as_str(self) -> &'static str {
        match self {
            VocabKind::Character => "character",
            VocabKind::WordPiece => "word-piece",
            VocabKind::MixedUnit => "mixed-unit",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "character" => Ok(VocabKind::Character),
            "word-piece" => Ok(VocabKind::WordPiece),
            "mixed-unit" => Ok(VocabKind::MixedUnit),
            other => Err(Error::Data(format!("unknown vocabulary kind {other:?}"))),
        }
    }
}

/// Training text: normalized transcript lines plus word frequencies.
#[derive(Debug, Clone)]
pub struct Corpus {
    lines: Vec<String>,
    word_freq: BTreeMap<String, u64>,
}

impl Corpus {
    /// Normalize lines (split on whitespace, rejoin single-spaced) and count
    /// words. Words must be made of alphabet characters (letters, apostrophe);
    /// anything else is a data error — casing and punctuation are the
    /// ingester's job.
    pub fn from_lines<I, S>(lines: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut norm = Vec::new();
        let mut word_freq = BTreeMap::new();
        for line in lines {
            let words: Vec<&str> = line.as_ref().split_whitespace().collect();
            for w in &words {
                if !w.chars().all(|c| c.is_ascii_lowercase() || c == '\'') {
                    return Err(Error::Data(format!(
                        "corpus word {w:?} contains characters outside the alphabet"
                    )));
                }
                *word_freq.entry(w.to_string()).or_insert(0) += 1;
            }
            norm.push(words.join(" "));
        }
        Ok(Corpus { lines: norm, word_freq })
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }

    pub fn word_freq(&self) -> &BTreeMap<String, u64> {
        &self.word_freq
    }

    fn require_nonempty(&self) -> Result<()> {
        if self.word_freq.is_empty() {
            return Err(Error::Data("corpus has no words".into()));
        }
        Ok(())
    }
}

/// An output-unit inventory with character decompositions.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    kind: VocabKind,
    units: Vec<String>,
    unit_to_id: BTreeMap<String, usize>,
    char_inventory: Vec<String>,
    unit_chars: Vec<Vec<usize>>,
    /// Word-piece merges in application order.
    merges: Vec<(String, String)>,
    /// Mixed-unit decompositions recorded at build time.
    decomps: BTreeMap<String, Vec<String>>,
}

impl Vocab {
    // ── Construction ─────────────────────────────────────────────────

    /// The degenerate inventory: specials plus single characters.
    pub fn character() -> Self {
        Self::base(VocabKind::Character)
    }

    fn base(kind: VocabKind) -> Self {
        let char_inventory = char_alphabet();
        let mut v = Vocab {
            kind,
            units: Vec::new(),
            unit_to_id: BTreeMap::new(),
            char_inventory,
            unit_chars: Vec::new(),
            merges: Vec::new(),
            decomps: BTreeMap::new(),
        };
        // Specials first (atomic), then the single characters.
        for i in 0..v.char_inventory.len() {
            let s = v.char_inventory[i].clone();
            v.push_unit(s, vec![i]);
        }
        v
    }

    fn push_unit(&mut self, s: String, chars: Vec<usize>) {
        let id = self.units.len();
        self.unit_to_id.insert(s.clone(), id);
        self.units.push(s);
        self.unit_chars.push(chars);
    }

    fn char_id(&self, c: char) -> Option<usize> {
        let s = c.to_string();
        self.char_inventory.iter().position(|x| *x == s)
    }

    fn chars_of(&self, s: &str) -> Option<Vec<usize>> {
        s.chars().map(|c| self.char_id(c)).collect()
    }

    /// Grow a word-piece inventory by repeatedly merging the most frequent
    /// adjacent unit pair inside corpus words, until `target_size` units
    /// exist or no pair occurs at least twice. Ties go to the
    /// lexicographically smallest merged string.
    pub fn build_wordpiece(corpus: &Corpus, target_size: usize) -> Result<Self> {
        corpus.require_nonempty()?;
        let mut v = Self::base(VocabKind::WordPiece);
        if target_size < v.units.len() {
            return Err(Error::Config(format!(
                "word-piece target size {target_size} is below the base inventory ({})",
                v.units.len()
            )));
        }

        // Current segmentation of every distinct corpus word.
        let mut segs: BTreeMap<&str, Vec<String>> = corpus
            .word_freq
            .keys()
            .map(|w| (w.as_str(), w.chars().map(|c| c.to_string()).collect()))
            .collect();

        while v.units.len() < target_size {
            let mut counts: BTreeMap<(&str, &str), u64> = BTreeMap::new();
            for (word, seg) in &segs {
                let freq = corpus.word_freq[*word];
                for pair in seg.windows(2) {
                    *counts.entry((pair[0].as_str(), pair[1].as_str())).or_insert(0) += freq;
                }
            }
            let best = counts.iter().max_by(|(pa, ca), (pb, cb)| {
                // Highest count wins; on ties the smallest merged string,
                // then the smallest pair, so the scan is order-free.
                let merged_a = format!("{}{}", pa.0, pa.1);
                let merged_b = format!("{}{}", pb.0, pb.1);
                ca.cmp(cb)
                    .then_with(|| merged_b.cmp(&merged_a))
                    .then_with(|| pb.cmp(pa))
            });
            let ((a, b), count) = match best {
                Some((pair, count)) => ((pair.0.to_string(), pair.1.to_string()), *count),
                None => break,
            };
            if count < 2 {
                break;
            }
            let merged = format!("{a}{b}");
            if !v.unit_to_id.contains_key(&merged) {
                let chars = v.chars_of(&merged).expect("merged unit uses alphabet characters");
                v.push_unit(merged, chars);
            }
            for seg in segs.values_mut() {
                apply_merge(seg, &a, &b);
            }
            v.merges.push((a, b));
        }
        Ok(v)
    }

    /// Build a mixed-unit inventory: words at or above `freq_threshold`
    /// become whole units; every infrequent word is decomposed by greedy
    /// longest-prefix match against the frequent words, and the leftover
    /// spans between matches become multi-character units. Single characters
    /// stay in the inventory as the floor.
    pub fn build_mixed_units(corpus: &Corpus, freq_threshold: u64) -> Result<Self> {
        corpus.require_nonempty()?;
        if freq_threshold < 1 {
            return Err(Error::Config("mixed-unit frequency threshold must be at least 1".into()));
        }
        let mut v = Self::base(VocabKind::MixedUnit);

        let frequent: BTreeSet<&str> = corpus
            .word_freq
            .iter()
            .filter(|(_, f)| **f >= freq_threshold)
            .map(|(w, _)| w.as_str())
            .collect();
        for w in &frequent {
            if !v.unit_to_id.contains_key(*w) {
                let chars = v.chars_of(w).expect("corpus words use alphabet characters");
                v.push_unit(w.to_string(), chars);
            }
        }

        for word in corpus.word_freq.keys() {
            if frequent.contains(word.as_str()) {
                continue;
            }
            let parts = decompose(word, |s| {
                longest_prefix(s, frequent.iter().copied())
            });
            for p in &parts {
                if !v.unit_to_id.contains_key(p) {
                    let chars = v.chars_of(p).expect("corpus words use alphabet characters");
                    v.push_unit(p.clone(), chars);
                }
            }
            v.decomps.insert(word.clone(), parts);
        }
        Ok(v)
    }

    // ── Accessors ────────────────────────────────────────────────────

    pub fn kind(&self) -> VocabKind {
        self.kind
    }

    /// Number of units (the model's output dimension).
    pub fn size(&self) -> usize {
        self.units.len()
    }

    pub fn units(&self) -> &[String] {
        &self.units
    }

    pub fn unit(&self, id: usize) -> Result<&str> {
        self.units
            .get(id)
            .map(String::as_str)
            .ok_or_else(|| Error::Data(format!("unit id {id} out of range ({})", self.units.len())))
    }

    pub fn id_of(&self, unit: &str) -> Option<usize> {
        self.unit_to_id.get(unit).copied()
    }

    pub fn char_inventory(&self) -> &[String] {
        &self.char_inventory
    }

    /// Character-id decomposition of a unit; specials are atomic.
    pub fn char_ids(&self, unit_id: usize) -> Result<&[usize]> {
        self.unit_chars
            .get(unit_id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Data(format!("unit id {unit_id} out of range ({})", self.units.len())))
    }

    pub fn sos(&self) -> usize {
        self.unit_to_id[SOS]
    }

    pub fn eos(&self) -> usize {
        self.unit_to_id[EOS]
    }

    pub fn space(&self) -> usize {
        self.unit_to_id[SPACE]
    }

    pub fn unk(&self) -> usize {
        self.unit_to_id[UNK]
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    // ── Tokenization ─────────────────────────────────────────────────

    /// Unit ids for a line: `<sos>`, the units of each word with `<space>`
    /// between adjacent words, `<eos>`. Characters outside the alphabet
    /// become `<unk>`.
    pub fn tokenize(&self, line: &str) -> Vec<usize> {
        let mut ids = vec![self.sos()];
        for (i, word) in line.split_whitespace().enumerate() {
            if i > 0 {
                ids.push(self.space());
            }
            self.word_units(word, &mut ids);
        }
        ids.push(self.eos());
        ids
    }

    fn word_units(&self, word: &str, out: &mut Vec<usize>) {
        match self.kind {
            VocabKind::Character => {
                for c in word.chars() {
                    out.push(self.char_id(c).map_or(self.unk(), |i| self.unit_to_id[&self.char_inventory[i]]));
                }
            }
            VocabKind::WordPiece => {
                let mut seg: Vec<String> = word.chars().map(|c| c.to_string()).collect();
                for (a, b) in &self.merges {
                    apply_merge(&mut seg, a, b);
                }
                for piece in seg {
                    out.push(self.id_of(&piece).unwrap_or_else(|| self.unk()));
                }
            }
            VocabKind::MixedUnit => {
                if let Some(id) = self.id_of(word) {
                    out.push(id);
                    return;
                }
                if let Some(parts) = self.decomps.get(word) {
                    for p in parts {
                        out.push(self.id_of(p).unwrap_or_else(|| self.unk()));
                    }
                    return;
                }
                // Unseen word: greedy longest-prefix against the whole
                // inventory (single characters guarantee progress for any
                // alphabet word); anything unmatched becomes <unk>.
                let chars: Vec<char> = word.chars().collect();
                let mut pos = 0;
                let candidates = || {
                    self.units
                        .iter()
                        .map(String::as_str)
                        .filter(|u| ![SOS, EOS, SPACE, UNK].contains(u))
                };
                while pos < chars.len() {
                    let rest: String = chars[pos..].iter().collect();
                    match longest_prefix(&rest, candidates()) {
                        Some(u) => {
                            out.push(self.unit_to_id[&u]);
                            pos += u.chars().count();
                        }
                        None => {
                            out.push(self.unk());
                            pos += 1;
                        }
                    }
                }
            }
        }
    }

    /// Inverse of [`Vocab::tokenize`] for in-inventory text: drops
    /// `<sos>`/`<eos>`, renders `<space>` as a single space, concatenates
    /// everything else.
    pub fn detokenize(&self, ids: &[usize]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            let unit = self.unit(id)?;
            if unit == SOS || unit == EOS {
                continue;
            }
            if unit == SPACE {
                out.push(' ');
            } else {
                out.push_str(unit);
            }
        }
        Ok(out)
    }

    // ── Serialization ────────────────────────────────────────────────

    /// Render as the vocabulary file format: a `kind<TAB>size` header, one
    /// `id<TAB>unit<TAB>char-ids` line per unit, then a `#merges` or
    /// `#decomp` section for the learned kinds.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{}\t{}", self.kind.as_str(), self.units.len());
        for (id, unit) in self.units.iter().enumerate() {
            let chars: Vec<String> = self.unit_chars[id].iter().map(|c| c.to_string()).collect();
            let _ = writeln!(s, "{id}\t{unit}\t{}", chars.join(" "));
        }
        match self.kind {
            VocabKind::Character => {}
            VocabKind::WordPiece => {
                let _ = writeln!(s, "#merges");
                for (a, b) in &self.merges {
                    let _ = writeln!(s, "{a}\t{b}");
                }
            }
            VocabKind::MixedUnit => {
                let _ = writeln!(s, "#decomp");
                for (word, parts) in &self.decomps {
                    let _ = writeln!(s, "{word}\t{}", parts.join(" "));
                }
            }
        }
        s
    }

    /// Parse and fully validate the vocabulary file format. Every invariant
    /// that [`Vocab::to_text`] guarantees is checked here, so a loaded
    /// vocabulary is as trustworthy as a built one.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Data("vocabulary file is empty".into()))?;
        let mut h = header.split('\t');
        let kind = VocabKind::parse(h.next().unwrap_or(""))?;
        let size: usize = h
            .next()
            .ok_or_else(|| Error::Data("vocabulary header is missing the size field".into()))?
            .parse()
            .map_err(|_| Error::Data(format!("bad vocabulary size in header {header:?}")))?;
        if h.next().is_some() {
            return Err(Error::Data("vocabulary header has trailing fields".into()));
        }

        let char_inventory = char_alphabet();
        let mut v = Vocab {
            kind,
            units: Vec::new(),
            unit_to_id: BTreeMap::new(),
            char_inventory,
            unit_chars: Vec::new(),
            merges: Vec::new(),
            decomps: BTreeMap::new(),
        };

        let mut section: Option<&str> = None;
        for line in lines {
            if line == "#merges" || line == "#decomp" {
                let expected = match kind {
                    VocabKind::WordPiece => "#merges",
                    VocabKind::MixedUnit => "#decomp",
                    VocabKind::Character => {
                        return Err(Error::Data(format!(
                            "character vocabulary must not contain a {line} section"
                        )))
                    }
                };
                if line != expected {
                    return Err(Error::Data(format!(
                        "{} vocabulary must not contain a {line} section",
                        kind.as_str()
                    )));
                }
                if section.is_some() {
                    return Err(Error::Data(format!("duplicate {line} section")));
                }
                section = Some(line);
                continue;
            }
            match section {
                None => {
                    let fields: Vec<&str> = line.split('\t').collect();
                    if fields.len() != 3 {
                        return Err(Error::Data(format!("bad unit line {line:?}")));
                    }
                    let id: usize = fields[0]
                        .parse()
                        .map_err(|_| Error::Data(format!("bad unit id in line {line:?}")))?;
                    if id != v.units.len() {
                        return Err(Error::Data(format!(
                            "unit ids must be sequential; expected {} got {id}",
                            v.units.len()
                        )));
                    }
                    let unit = fields[1];
                    if unit.is_empty() {
                        return Err(Error::Data("empty unit string".into()));
                    }
                    if v.unit_to_id.contains_key(unit) {
                        return Err(Error::Data(format!("duplicate unit {unit:?}")));
                    }
                    let mut chars = Vec::new();
                    for c in fields[2].split(' ') {
                        let ci: usize = c
                            .parse()
                            .map_err(|_| Error::Data(format!("bad character id in line {line:?}")))?;
                        if ci >= v.char_inventory.len() {
                            return Err(Error::Data(format!(
                                "character id {ci} out of range in line {line:?}"
                            )));
                        }
                        chars.push(ci);
                    }
                    v.push_unit(unit.to_string(), chars);
                }
                Some("#merges") => {
                    let fields: Vec<&str> = line.split('\t').collect();
                    if fields.len() != 2 || fields[0].is_empty() || fields[1].is_empty() {
                        return Err(Error::Data(format!("bad merge line {line:?}")));
                    }
                    v.merges.push((fields[0].to_string(), fields[1].to_string()));
                }
                Some(_) => {
                    let fields: Vec<&str> = line.split('\t').collect();
                    if fields.len() != 2 {
                        return Err(Error::Data(format!("bad decomposition line {line:?}")));
                    }
                    let parts: Vec<String> = fields[1].split(' ').map(String::from).collect();
                    if parts.iter().any(String::is_empty) {
                        return Err(Error::Data(format!("bad decomposition line {line:?}")));
                    }
                    v.decomps.insert(fields[0].to_string(), parts);
                }
            }
        }

        if v.units.len() != size {
            return Err(Error::Data(format!(
                "vocabulary header declares {size} units but {} were listed",
                v.units.len()
            )));
        }
        v.validate()?;
        Ok(v)
    }

    /// Structural invariants shared by built and loaded vocabularies.
    fn validate(&self) -> Result<()> {
        for special in [SOS, EOS, SPACE, UNK] {
            let id = self
                .id_of(special)
                .ok_or_else(|| Error::Data(format!("special token {special} is missing")))?;
            let expect = self
                .char_inventory
                .iter()
                .position(|c| c == special)
                .expect("specials are in the fixed alphabet");
            if self.unit_chars[id] != vec![expect] {
                return Err(Error::Data(format!(
                    "special token {special} must decompose to its own atomic character"
                )));
            }
            if self.units.iter().filter(|u| *u == special).count() != 1 {
                return Err(Error::Data(format!("special token {special} must appear exactly once")));
            }
        }
        for (id, unit) in self.units.iter().enumerate() {
            if [SOS, EOS, SPACE, UNK].contains(&unit.as_str()) {
                continue;
            }
            let joined: String = self.unit_chars[id]
                .iter()
                .map(|&c| self.char_inventory[c].as_str())
                .collect();
            if joined != *unit {
                return Err(Error::Data(format!(
                    "unit {unit:?} character decomposition spells {joined:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text)
    }
}

/// One left-to-right pass replacing adjacent `(a, b)` with their
/// concatenation. A freshly merged token is not rematched at the same
/// position, so repeated symbols collapse pairwise.
fn apply_merge(seg: &mut Vec<String>, a: &str, b: &str) {
    let mut i = 0;
    while i + 1 < seg.len() {
        if seg[i] == a && seg[i + 1] == b {
            seg[i] = format!("{a}{b}");
            seg.remove(i + 1);
        }
        i += 1;
    }
}

/// Longest candidate that is a prefix of `s` (by character count).
fn longest_prefix<'a, I>(s: &str, candidates: I) -> Option<String>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut best: Option<&str> = None;
    for c in candidates {
        if s.starts_with(c) && best.is_none_or(|b| c.chars().count() > b.chars().count()) {
            best = Some(c);
        }
    }
    best.map(String::from)
}

/// Split a word into frequent-word matches and the leftover spans between
/// them. `matcher` returns the longest frequent word starting at the given
/// suffix, if any.
fn decompose<F>(word: &str, matcher: F) -> Vec<String>
where
    F: Fn(&str) -> Option<String>,
{
    let chars: Vec<char> = word.chars().collect();
    let mut parts = Vec::new();
    let mut pos = 0;
    while pos < chars.len() {
        let rest: String = chars[pos..].iter().collect();
        if let Some(m) = matcher(&rest) {
            let len = m.chars().count();
            parts.push(m);
            pos += len;
            continue;
        }
        // Leftover: extend until a frequent word matches again.
        let mut end = pos + 1;
        while end < chars.len() {
            let tail: String = chars[end..].iter().collect();
            if matcher(&tail).is_some() {
                break;
            }
            end += 1;
        }
        parts.push(chars[pos..end].iter().collect());
        pos = end;
    }
    parts
}
