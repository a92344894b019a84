use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Token strings with designated padding, start and end ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    pub pad: usize,
    pub bos: usize,
    pub eos: usize,
}

impl Vocab {
    pub fn new(tokens: Vec<String>, pad: usize, bos: usize, eos: usize) -> Result<Self> {
        let v = tokens.len();
        if pad == bos || pad == eos || bos == eos {
            return Err(Error::Invalid(format!("special ids must differ: pad {pad}, bos {bos}, eos {eos}")));
        }
        if pad.max(bos).max(eos) >= v {
            return Err(Error::Invalid(format!("special id out of range for {v} tokens")));
        }
        if let Some(t) = tokens.iter().find(|t| t.is_empty() || t.contains(['\n', '\r'])) {
            return Err(Error::Invalid(format!("token {t:?} is empty or spans lines")));
        }
        Ok(Self { tokens, pad, bos, eos })
    }

    /// `<pad> <bos> <eos> w0 w1 ...` with `size` entries in total.
    pub fn synthetic(size: usize) -> Result<Self> {
        if size < 3 {
            return Err(Error::Invalid(format!("vocabulary of {size} cannot hold the special tokens")));
        }
        let mut tokens: Vec<String> = ["<pad>", "<bos>", "<eos>"].map(String::from).to_vec();
        tokens.extend((0..size - 3).map(|i| format!("w{i}")));
        Self::new(tokens, 0, 1, 2)
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn is_special(&self, id: usize) -> bool {
        id == self.pad || id == self.bos || id == self.eos
    }

    /// Words of a generated sequence, stopping at the first end token.
    pub fn words(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .take_while(|&&i| i != self.eos)
            .filter(|&&i| !self.is_special(i))
            .map(|&i| self.token(i).unwrap_or("<unk>").to_string())
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("pad={}\nbos={}\neos={}\n", self.pad, self.bos, self.eos);
        for t in &self.tokens {
            let _ = writeln!(s, "{t}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let mut header = |key: &str| -> Result<usize> {
            let line = lines
                .next()
                .ok_or_else(|| Error::Format(format!("vocab header is missing {key}")))?;
            let value = line
                .strip_prefix(key)
                .and_then(|r| r.strip_prefix('='))
                .ok_or_else(|| Error::Format(format!("expected `{key}=<id>`, got {line:?}")))?;
            value
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("bad {key} id {value:?}")))
        };
        let (pad, bos, eos) = (header("pad")?, header("bos")?, header("eos")?);
        let tokens = lines.map(String::from).collect();
        Self::new(tokens, pad, bos, eos).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_text())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// Padded token matrix `(B, S)`; `pad_mask` is `true` at padding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CaptionBatch {
    pub token_ids: Vec<Vec<usize>>,
    pub pad_mask: Vec<Vec<bool>>,
}

impl CaptionBatch {
    /// Pads complete captions to a common length. Each must start with the
    /// start token and hold exactly one end token, at its end.
    pub fn new(captions: &[Vec<usize>], vocab: &Vocab) -> Result<Self> {
        if captions.is_empty() {
            return Err(Error::Invalid("empty caption batch".into()));
        }
        let s = captions.iter().map(Vec::len).max().unwrap_or(0);
        let mut token_ids = Vec::with_capacity(captions.len());
        let mut pad_mask = Vec::with_capacity(captions.len());
        for (i, c) in captions.iter().enumerate() {
            if c.first() != Some(&vocab.bos) {
                return Err(Error::Invalid(format!("caption {i} does not start with the start token")));
            }
            if c.iter().filter(|&&t| t == vocab.eos).count() != 1 || c.last() != Some(&vocab.eos) {
                return Err(Error::Invalid(format!("caption {i} must end with exactly one end token")));
            }
            if let Some(&bad) = c.iter().find(|&&t| t >= vocab.size() || t == vocab.pad) {
                return Err(Error::Invalid(format!("caption {i} holds invalid token {bad}")));
            }
            let mut row = c.clone();
            row.resize(s, vocab.pad);
            pad_mask.push((0..s).map(|j| j >= c.len()).collect());
            token_ids.push(row);
        }
        Ok(Self { token_ids, pad_mask })
    }

    pub fn batch_size(&self) -> usize {
        self.token_ids.len()
    }

    pub fn seq_len(&self) -> usize {
        self.token_ids.first().map_or(0, Vec::len)
    }

    pub fn flat_ids(&self) -> Vec<usize> {
        self.token_ids.iter().flatten().copied().collect()
    }

    /// Next-token targets: position `s` is scored against token `s + 1`;
    /// `None` where that is padding or past the end.
    pub fn targets(&self) -> Vec<Vec<Option<usize>>> {
        self.token_ids
            .iter()
            .zip(&self.pad_mask)
            .map(|(row, mask)| {
                (0..row.len())
                    .map(|s| (s + 1 < row.len() && !mask[s + 1]).then(|| row[s + 1]))
                    .collect()
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let v = Vocab::synthetic(8).unwrap();
        let text = v.to_text();
        assert!(text.starts_with("pad=0\nbos=1\neos=2\n<pad>\n"));
        assert_eq!(Vocab::from_text(&text).unwrap(), v);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        v.save(&p).unwrap();
        assert_eq!(Vocab::load(&p).unwrap(), v);
    }

    #[test]
    fn malformed_vocab_is_rejected() {
        assert!(Vocab::from_text("pad=0\nbos=1\n<pad>\n").is_err());
        assert!(Vocab::from_text("pad=0\nbos=0\neos=2\na\nb\nc\n").is_err());
        assert!(Vocab::from_text("pad=0\nbos=1\neos=9\na\nb\nc\n").is_err());
        assert!(Vocab::from_text("bos=0\npad=1\neos=2\na\nb\nc\n").is_err());
        assert!(Vocab::synthetic(2).is_err());
    }

    #[test]
    fn batch_pads_and_aligns_targets() {
        let v = Vocab::synthetic(8).unwrap();
        let b = CaptionBatch::new(&[vec![1, 3, 4, 2], vec![1, 5, 2]], &v).unwrap();
        assert_eq!(b.token_ids[1], vec![1, 5, 2, 0]);
        assert_eq!(b.pad_mask[1], vec![false, false, false, true]);
        assert_eq!(b.targets()[0], vec![Some(3), Some(4), Some(2), None]);
        assert_eq!(b.targets()[1], vec![Some(5), Some(2), None, None]);
        assert_eq!(v.words(&[3, 4, 2, 0]), vec!["w0", "w1"]);
    }

    #[test]
    fn invalid_captions_are_rejected() {
        let v = Vocab::synthetic(8).unwrap();
        assert!(CaptionBatch::new(&[vec![3, 2]], &v).is_err());
        assert!(CaptionBatch::new(&[vec![1, 3]], &v).is_err());
        assert!(CaptionBatch::new(&[vec![1, 2, 3, 2]], &v).is_err());
        assert!(CaptionBatch::new(&[vec![1, 9, 2]], &v).is_err());
        assert!(CaptionBatch::new(&[], &v).is_err());
    }
}
