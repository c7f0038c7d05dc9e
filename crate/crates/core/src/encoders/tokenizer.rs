//! Byte-level BPE tokenizer used by the CLIP text tower.
//!
//! The merge table is the one distributed with the original CLIP release and is
//! embedded in the binary. Text is lower-cased and whitespace-collapsed before
//! splitting; ftfy-style mojibake repair is not applied.

use std::collections::HashMap;
use std::io::Read;

use regex::Regex;

use crate::error::{Error, Result};

const MERGES_GZ: &[u8] = include_bytes!("../../assets/bpe_simple_vocab_16e6.txt.gz");
const MERGE_COUNT: usize = 49152 - 256 - 2;

pub const CONTEXT_LENGTH: usize = 77;
pub const START_OF_TEXT: u32 = 49406;
pub const END_OF_TEXT: u32 = 49407;
pub const VOCAB_SIZE: usize = 49408;

pub struct ClipTokenizer {
    byte_encoder: [char; 256],
    encoder: HashMap<String, u32>,
    ranks: HashMap<(String, String), usize>,
    pattern: Regex,
}

/// Byte → symbol table, plus the symbols in vocabulary order (printable bytes
/// first, then the remapped control and whitespace bytes).
fn bytes_to_unicode() -> ([char; 256], Vec<char>) {
    let mut order: Vec<u32> = (u32::from('!')..=u32::from('~')).collect();
    order.extend(u32::from('¡')..=u32::from('¬'));
    order.extend(u32::from('®')..=u32::from('ÿ'));
    let mut table = ['\0'; 256];
    for &b in &order {
        table[b as usize] = char::from_u32(b).unwrap();
    }
    let mut extra = 0;
    for b in 0..256u32 {
        if !order.contains(&b) {
            table[b as usize] = char::from_u32(256 + extra).unwrap();
            extra += 1;
            order.push(b);
        }
    }
    let symbols = order.iter().map(|&b| table[b as usize]).collect();
    (table, symbols)
}

impl ClipTokenizer {
    pub fn new() -> Result<Self> {
        let mut text = String::new();
        flate2::read::GzDecoder::new(MERGES_GZ).read_to_string(&mut text)?;
        let merges: Vec<(String, String)> = text
            .lines()
            .skip(1)
            .take(MERGE_COUNT)
            .map(|l| {
                let mut parts = l.split_whitespace();
                match (parts.next(), parts.next()) {
                    (Some(a), Some(b)) => Ok((a.to_string(), b.to_string())),
                    _ => Err(Error::InvalidInput(format!("malformed merge line {l:?}"))),
                }
            })
            .collect::<Result<_>>()?;

        let (byte_encoder, symbols) = bytes_to_unicode();
        let mut vocab: Vec<String> = symbols.iter().map(|c| c.to_string()).collect();
        vocab.extend(symbols.iter().map(|c| format!("{c}</w>")));
        vocab.extend(merges.iter().map(|(a, b)| format!("{a}{b}")));
        vocab.push("<|startoftext|>".into());
        vocab.push("<|endoftext|>".into());
        debug_assert_eq!(vocab.len(), VOCAB_SIZE);

        let encoder = vocab.into_iter().enumerate().map(|(i, t)| (t, i as u32)).collect();
        let ranks = merges.into_iter().enumerate().map(|(i, m)| (m, i)).collect();
        let pattern = Regex::new(
            r"(?i)<\|startoftext\|>|<\|endoftext\|>|'s|'t|'re|'ve|'m|'ll|'d|\p{L}+|\p{N}|[^\s\p{L}\p{N}]+",
        )
        .expect("static pattern");
        Ok(Self {
            byte_encoder,
            encoder,
            ranks,
            pattern,
        })
    }

    fn bpe(&self, token: &str) -> Vec<String> {
        let chars: Vec<char> = token.chars().collect();
        let mut word: Vec<String> = chars.iter().map(|c| c.to_string()).collect();
        if let Some(last) = word.last_mut() {
            last.push_str("</w>");
        }
        loop {
            let best = word
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0].clone(), w[1].clone())).map(|r| (*r, w)))
                .min_by_key(|(r, _)| *r)
                .map(|(_, w)| (w[0].clone(), w[1].clone()));
            let Some((first, second)) = best else { break };
            let mut merged = Vec::with_capacity(word.len());
            let mut i = 0;
            while i < word.len() {
                if i + 1 < word.len() && word[i] == first && word[i + 1] == second {
                    merged.push(format!("{first}{second}"));
                    i += 2;
                } else {
                    merged.push(word[i].clone());
                    i += 1;
                }
            }
            word = merged;
            if word.len() == 1 {
                break;
            }
        }
        word
    }

    /// Token ids for `text`, without start/end markers.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let cleaned = text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
        let mut ids = Vec::new();
        for m in self.pattern.find_iter(&cleaned) {
            let piece: String = m.as_str().bytes().map(|b| self.byte_encoder[b as usize]).collect();
            for tok in self.bpe(&piece) {
                // every byte symbol and every merge result is in the vocabulary
                ids.push(self.encoder[&tok]);
            }
        }
        ids
    }

    /// `[start, tokens.., end]`, truncated so that the end marker always fits in
    /// `context` positions.
    pub fn encode_with_markers(&self, text: &str, context: usize) -> Vec<u32> {
        let mut ids = vec![START_OF_TEXT];
        ids.extend(self.encode(text));
        ids.truncate(context.saturating_sub(1).max(1));
        ids.push(END_OF_TEXT);
        ids
    }
}
