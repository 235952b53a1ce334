use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RougeVariant {
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
    #[serde(rename = "l")]
    L,
}

impl RougeVariant {
    pub const ALL: [RougeVariant; 3] = [RougeVariant::One, RougeVariant::Two, RougeVariant::L];
}

impl fmt::Display for RougeVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RougeVariant::One => "rouge-1",
            RougeVariant::Two => "rouge-2",
            RougeVariant::L => "rouge-l",
        })
    }
}

impl FromStr for RougeVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().trim_start_matches("rouge-") {
            "1" => Ok(RougeVariant::One),
            "2" => Ok(RougeVariant::Two),
            "l" => Ok(RougeVariant::L),
            _ => Err(Error::Config(format!("unknown rouge variant `{s}`"))),
        }
    }
}

/// Lowercased whitespace tokens.
pub fn rouge_tokens(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

fn f1(overlap: f64, cand: usize, refr: usize) -> f64 {
    if overlap == 0.0 {
        return 0.0;
    }
    let p = overlap / cand as f64;
    let r = overlap / refr as f64;
    2.0 * p * r / (p + r)
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    for w in tokens.windows(n) {
        *m.entry(w).or_insert(0) += 1;
    }
    m
}

fn ngram_f1(cand: &[String], refr: &[String], n: usize) -> f64 {
    let cn = cand.len().saturating_sub(n - 1);
    let rn = refr.len().saturating_sub(n - 1);
    if cn == 0 && rn == 0 {
        return if cand == refr { 1.0 } else { 0.0 };
    }
    if cn == 0 || rn == 0 {
        return 0.0;
    }
    let c = ngram_counts(cand, n);
    let r = ngram_counts(refr, n);
    let overlap: usize = c.iter().map(|(g, &k)| k.min(*r.get(g).unwrap_or(&0))).sum();
    f1(overlap as f64, cn, rn)
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE F1 over lowercased whitespace tokens. Two empty strings score 1,
/// one empty string scores 0.
pub fn rouge(candidate: &str, reference: &str, variant: RougeVariant) -> f64 {
    let c = rouge_tokens(candidate);
    let r = rouge_tokens(reference);
    match (c.is_empty(), r.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    match variant {
        RougeVariant::One => ngram_f1(&c, &r, 1),
        RougeVariant::Two => ngram_f1(&c, &r, 2),
        RougeVariant::L => f1(lcs_len(&c, &r) as f64, c.len(), r.len()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_cases() {
        for v in RougeVariant::ALL {
            assert_eq!(rouge("The cat sat", "the CAT sat", v), 1.0);
            assert_eq!(rouge("a b", "c d", v), 0.0);
            assert_eq!(rouge("", "", v), 1.0);
            assert_eq!(rouge("", "x", v), 0.0);
        }
        assert!((rouge("the cat", "the cat sat", RougeVariant::One) - 0.8).abs() < 1e-12);
        assert!((rouge("the cat", "the cat sat", RougeVariant::Two) - 2.0 / 3.0).abs() < 1e-12);
        assert!((rouge("a b c d", "a c b d", RougeVariant::L) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn single_token_bigrams() {
        assert_eq!(rouge("x", "x", RougeVariant::Two), 1.0);
        assert_eq!(rouge("x", "x y", RougeVariant::Two), 0.0);
    }

    #[test]
    fn variant_names_parse() {
        for v in RougeVariant::ALL {
            assert_eq!(v.to_string().parse::<RougeVariant>().unwrap(), v);
        }
    }
}
