use crate::error::{Error, Result};

pub const DEFAULT_DEDUP_THRESHOLD: f64 = 0.8;

/// Character-level edit distance (unit insert/delete/substitute costs).
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `1 - dist(a, b) / max(|a|, |b|)` in characters; two empty strings give 1.
pub fn levenshtein_ratio(a: &str, b: &str) -> f64 {
    let longest = a.chars().count().max(b.chars().count());
    if longest == 0 {
        return 1.0;
    }
    1.0 - levenshtein(a, b) as f64 / longest as f64
}

/// Drops every training item whose key is at least `threshold`-similar to
/// any test item's key.
pub fn dedup_train<T>(train: Vec<T>, test: &[T], key: impl Fn(&T) -> &str, threshold: f64) -> Result<Vec<T>> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::Config(format!("dedup threshold {threshold} outside (0, 1]")));
    }
    let test_keys: Vec<(&str, usize)> = test.iter().map(|t| (key(t), key(t).chars().count())).collect();
    Ok(train
        .into_iter()
        .filter(|item| {
            let k = key(item);
            let len = k.chars().count();
            !test_keys.iter().any(|&(other, other_len)| {
                let longest = len.max(other_len);
                // The length gap alone bounds the ratio from above.
                if longest > 0 && 1.0 - len.abs_diff(other_len) as f64 / (longest as f64) < threshold {
                    return false;
                }
                levenshtein_ratio(k, other) >= threshold
            })
        })
        .collect())
}
