//! Atom-wise SMILES tokenization.
//!
//! Longest-match alternation, in priority order: bracket atoms `[...]` as a
//! single token; two-letter organic-subset atoms Cl, Br; single-letter atoms
//! B C N O P S F I and aromatic b c n o p s; ring-bond digits and `%NN`
//! two-digit ring closures; bond/branch/structure symbols. Concatenating the
//! emitted surface tokens always reproduces the input byte-for-byte.

use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const MASK: &str = "<mask>";

/// Specials occupy ids 0..5 in this fixed order.
pub const SPECIALS: [&str; 5] = [PAD, UNK, BOS, EOS, MASK];

const SINGLE_ATOMS: &[u8] = b"BCNOPSFIbcnops";
const SYMBOLS: &[u8] = b"-=#$:/\\().+@*";

/// Split a SMILES string into surface tokens. Errors carry the byte offset of
/// the first unmatched character.
pub fn split_surface(smiles: &str) -> Result<Vec<&str>> {
    let bytes = smiles.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let b = bytes[i];
        let len = match b {
            b'[' => {
                let close = bytes[i..]
                    .iter()
                    .position(|&c| c == b']')
                    .ok_or_else(|| {
                        Error::Tokenizer(format!("unclosed bracket atom at byte {i}"))
                    })?;
                close + 1
            }
            b'C' if bytes.get(i + 1) == Some(&b'l') => 2,
            b'B' if bytes.get(i + 1) == Some(&b'r') => 2,
            b'%' => {
                let two_digits = bytes.get(i + 1).is_some_and(u8::is_ascii_digit)
                    && bytes.get(i + 2).is_some_and(u8::is_ascii_digit);
                if !two_digits {
                    return Err(Error::Tokenizer(format!(
                        "'%' without two-digit ring closure at byte {i}"
                    )));
                }
                3
            }
            _ if b.is_ascii_digit() => 1,
            _ if SINGLE_ATOMS.contains(&b) => 1,
            _ if SYMBOLS.contains(&b) => 1,
            _ => {
                return Err(Error::Tokenizer(format!(
                    "unrecognized character {:?} at byte {i}",
                    b as char
                )))
            }
        };
        out.push(&smiles[i..i + len]);
        i += len;
    }
    Ok(out)
}

/// Token inventory. Immutable after construction; ids are contiguous from 0
/// with the five specials at ids 0..5.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    id_of: HashMap<String, u32>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut id_of = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if id_of.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Tokenizer(format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, id_of })
    }

    /// Build from a corpus stream, one SMILES per line. Specials first, then
    /// every distinct surface token in first-occurrence order.
    pub fn build<R: BufRead>(corpus: R) -> Result<Self> {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut seen: HashMap<String, ()> =
            tokens.iter().map(|t| (t.clone(), ())).collect();
        let mut any = false;
        for (lineno, line) in corpus.lines().enumerate() {
            let line = line.map_err(|e| {
                Error::Tokenizer(format!("line {}: {e}", lineno + 1))
            })?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            any = true;
            for tok in split_surface(line)? {
                if !seen.contains_key(tok) {
                    seen.insert(tok.to_string(), ());
                    tokens.push(tok.to_string());
                }
            }
        }
        if !any {
            return Err(Error::Tokenizer("empty corpus".to_string()));
        }
        Vocabulary::from_tokens(tokens)
    }

    pub fn build_from_lines<'a, I: IntoIterator<Item = &'a str>>(lines: I) -> Result<Self> {
        let joined: String = lines
            .into_iter()
            .map(|l| format!("{l}\n"))
            .collect();
        Vocabulary::build(joined.as_bytes())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.id_of.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn pad_id(&self) -> u32 {
        0
    }
    pub fn unk_id(&self) -> u32 {
        1
    }
    pub fn bos_id(&self) -> u32 {
        2
    }
    pub fn eos_id(&self) -> u32 {
        3
    }
    pub fn mask_id(&self) -> u32 {
        4
    }

    pub fn is_special(&self, id: u32) -> bool {
        id < SPECIALS.len() as u32
    }

    /// Non-special ids, in order. The random-replacement pool for masking.
    pub fn content_ids(&self) -> impl Iterator<Item = u32> + '_ {
        (SPECIALS.len() as u32)..(self.tokens.len() as u32)
    }

    /// Newline-delimited tokens, line number = id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut body = String::new();
        for t in &self.tokens {
            body.push_str(t);
            body.push('\n');
        }
        std::fs::write(path, body)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path)?;
        let tokens: Vec<String> = body.lines().map(str::to_string).collect();
        if tokens.len() < SPECIALS.len()
            || tokens[..SPECIALS.len()] != SPECIALS.map(str::to_string)
        {
            return Err(Error::Tokenizer(format!(
                "vocabulary file {} lacks the fixed special-token prefix",
                path.display()
            )));
        }
        Vocabulary::from_tokens(tokens)
    }
}

/// Encoded SMILES; ids exclude <bos>/<eos> (added at model input time).
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub source: String,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Unknown surface tokens map to `<unk>`.
pub fn tokenize(smiles: &str, vocab: &Vocabulary) -> Result<TokenSequence> {
    if smiles.is_empty() {
        return Err(Error::Tokenizer("empty SMILES".to_string()));
    }
    let ids = split_surface(smiles)?
        .into_iter()
        .map(|t| vocab.id(t).unwrap_or(vocab.unk_id()))
        .collect();
    Ok(TokenSequence {
        ids,
        source: smiles.to_string(),
    })
}

/// Concatenate surface tokens back into a SMILES string. `<bos>`/`<eos>` are
/// skipped; `<unk>`, `<pad>`, `<mask>` violate the contract and error.
pub fn detokenize(seq: &TokenSequence, vocab: &Vocabulary) -> Result<String> {
    let mut out = String::new();
    for &id in &seq.ids {
        if id == vocab.bos_id() || id == vocab.eos_id() {
            continue;
        }
        if id == vocab.unk_id() || id == vocab.pad_id() || id == vocab.mask_id() {
            return Err(Error::Tokenizer(format!(
                "cannot detokenize special token id {id}"
            )));
        }
        let tok = vocab
            .token(id)
            .ok_or_else(|| Error::Tokenizer(format!("id {id} out of vocabulary")))?;
        out.push_str(tok);
    }
    Ok(out)
}

/// Retain sequences whose token count is at most `max_len`, preserving order.
pub fn filter_by_length(
    sequences: impl IntoIterator<Item = TokenSequence>,
    max_len: usize,
) -> Vec<TokenSequence> {
    sequences
        .into_iter()
        .filter(|s| s.len() <= max_len)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn build_vocab_cco() {
        let v = Vocabulary::build_from_lines(["CCO"]).unwrap();
        assert_eq!(v.len(), 7); // 5 specials + C + O
        assert_eq!(v.token(5), Some("C"));
        assert_eq!(v.token(6), Some("O"));
    }

    #[test]
    fn build_vocab_set_semantics() {
        let a = Vocabulary::build_from_lines(["CCO", "OCC"]).unwrap();
        let b = Vocabulary::build_from_lines(["CCO"]).unwrap();
        assert_eq!(a.len(), 7);
        assert_eq!(a, b);
    }

    #[test]
    fn build_vocab_empty_errors() {
        let err = Vocabulary::build_from_lines([]).unwrap_err().to_string();
        assert!(err.contains("empty corpus"));
    }

    #[test]
    fn tokenize_simple_atoms() {
        assert_eq!(split_surface("CCO").unwrap(), vec!["C", "C", "O"]);
    }

    #[test]
    fn tokenize_benzene() {
        assert_eq!(
            split_surface("c1ccccc1").unwrap(),
            vec!["c", "1", "c", "c", "c", "c", "c", "1"]
        );
    }

    #[test]
    fn tokenize_bracket_atom_is_one_token() {
        assert_eq!(
            split_surface("C[C@@H](N)O").unwrap(),
            vec!["C", "[C@@H]", "(", "N", ")", "O"]
        );
    }

    #[test]
    fn tokenize_two_letter_atoms() {
        assert_eq!(split_surface("ClBr").unwrap(), vec!["Cl", "Br"]);
    }

    #[test]
    fn tokenize_percent_ring_closure() {
        assert_eq!(split_surface("C%12C").unwrap(), vec!["C", "%12", "C"]);
    }

    #[test]
    fn tokenize_unmatched_char_reports_offset() {
        let err = split_surface("CC?").unwrap_err().to_string();
        assert!(err.contains("byte 2"), "{err}");
    }

    #[test]
    fn unknown_maps_to_unk() {
        let v = Vocabulary::build_from_lines(["CCO"]).unwrap();
        let seq = tokenize("CNC", &v).unwrap();
        assert_eq!(seq.ids[1], v.unk_id());
    }

    #[test]
    fn detokenize_round_trip() {
        let v = Vocabulary::build_from_lines(["CCO", "c1ccccc1"]).unwrap();
        for s in ["CCO", "c1ccccc1"] {
            let seq = tokenize(s, &v).unwrap();
            assert_eq!(detokenize(&seq, &v).unwrap(), s);
        }
    }

    #[test]
    fn detokenize_rejects_mask() {
        let v = Vocabulary::build_from_lines(["CCO"]).unwrap();
        let seq = TokenSequence {
            ids: vec![v.mask_id()],
            source: String::new(),
        };
        assert!(detokenize(&seq, &v).is_err());
    }

    #[test]
    fn filter_by_length_boundary() {
        let v = Vocabulary::build_from_lines(["CCO"]).unwrap();
        let mk = |n: usize| TokenSequence {
            ids: vec![v.id("C").unwrap(); n],
            source: "C".repeat(n),
        };
        let kept = filter_by_length(vec![mk(3), mk(512), mk(513)], 512);
        assert_eq!(kept.iter().map(TokenSequence::len).collect::<Vec<_>>(), vec![3, 512]);
        assert!(filter_by_length(vec![mk(3)], 1).is_empty());
        assert!(filter_by_length(Vec::new(), 512).is_empty());
    }

    #[test]
    fn vocab_save_load_stable_ids() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = Vocabulary::build_from_lines(["C[NH2+]Cl", "c1ccccc1O"]).unwrap();
        v.save(&path).unwrap();
        let w = Vocabulary::load(&path).unwrap();
        assert_eq!(v, w);
    }
}
