//! Activation codes, Hamming geometry and Hamming-ranked retrieval.

use std::collections::HashSet;
use std::fmt::Write as _;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CodeError {
    #[error("code bits must be -1 or +1, found {0}")]
    InvalidBit(i64),
    #[error("code length mismatch: expected {expected}, got {got}")]
    Length { expected: usize, got: usize },
    #[error("preactivation contains NaN at position {0}")]
    NotANumber(usize),
    #[error("need at least {needed} codes, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("duplicate index id {0}")]
    DuplicateId(u64),
    #[error("k must be at least 1")]
    ZeroK,
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

pub type Result<T> = std::result::Result<T, CodeError>;

/// A string over {−1, +1}.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ActivationCode(Vec<i8>);

impl ActivationCode {
    pub fn new(bits: Vec<i8>) -> Result<Self> {
        if let Some(&b) = bits.iter().find(|&&b| b != 1 && b != -1) {
            return Err(CodeError::InvalidBit(b as i64));
        }
        Ok(Self(bits))
    }

    pub fn from_bools(bits: impl IntoIterator<Item = bool>) -> Self {
        Self(bits.into_iter().map(|b| if b { 1 } else { -1 }).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn bits(&self) -> &[i8] {
        &self.0
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&b| b as f64).collect()
    }

    pub fn negate_bit(&mut self, d: usize) {
        self.0[d] = -self.0[d];
    }

    pub fn dot(&self, other: &Self) -> Result<i64> {
        self.same_len(other)?;
        Ok(self.0.iter().zip(&other.0).map(|(&a, &b)| (a * b) as i64).sum())
    }

    fn same_len(&self, other: &Self) -> Result<()> {
        if self.len() != other.len() {
            return Err(CodeError::Length {
                expected: self.len(),
                got: other.len(),
            });
        }
        Ok(())
    }

    /// `+1 → '1'`, `−1 → '0'`, in bit order.
    pub fn to_bitstring(&self) -> String {
        self.0.iter().map(|&b| if b > 0 { '1' } else { '0' }).collect()
    }

    pub fn from_bitstring(s: &str) -> Option<Self> {
        s.chars()
            .map(|c| match c {
                '1' => Some(1),
                '0' => Some(-1),
                _ => None,
            })
            .collect::<Option<Vec<i8>>>()
            .map(Self)
    }

    /// Bit `d` set iff code bit `d` is `+1`. Requires `len() <= 64`.
    pub fn to_mask(&self) -> u64 {
        debug_assert!(self.len() <= 64);
        self.0
            .iter()
            .enumerate()
            .fold(0u64, |m, (d, &b)| if b > 0 { m | (1 << d) } else { m })
    }

    pub fn from_mask(mask: u64, d: usize) -> Self {
        Self((0..d).map(|i| if mask >> i & 1 == 1 { 1 } else { -1 }).collect())
    }
}

/// Sign pattern of a preactivation row; `sign(0) = +1`.
pub fn sign_code(a: &[f64]) -> Result<ActivationCode> {
    if let Some(i) = a.iter().position(|v| v.is_nan()) {
        return Err(CodeError::NotANumber(i));
    }
    Ok(ActivationCode::from_bools(a.iter().map(|&v| v >= 0.0)))
}

/// `(D − cᵢ·cⱼ)/2`.
pub fn hamming(a: &ActivationCode, b: &ActivationCode) -> Result<usize> {
    let dot = a.dot(b)?;
    let d = (a.len() as i64 - dot) / 2;
    debug_assert_eq!(d as usize, hamming_by_count(a, b));
    Ok(d as usize)
}

/// Direct count of differing positions. Assumes equal lengths.
pub fn hamming_by_count(a: &ActivationCode, b: &ActivationCode) -> usize {
    a.0.iter().zip(&b.0).filter(|(x, y)| x != y).count()
}

/// Mean Hamming distance over all ordered pairs of distinct indices.
pub fn avg_hamming(codes: &[ActivationCode]) -> Result<f64> {
    let n = codes.len();
    if n < 2 {
        return Err(CodeError::TooFew { needed: 2, got: n });
    }
    let mut total = 0usize;
    for i in 0..n {
        for j in (i + 1)..n {
            total += hamming(&codes[i], &codes[j])?;
        }
    }
    // each unordered pair counted twice among the N(N−1) ordered pairs
    Ok(2.0 * total as f64 / (n * (n - 1)) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub id: u64,
    pub code: ActivationCode,
    pub label: usize,
}

/// Code table for Hamming-ranked retrieval.
#[derive(Debug, Clone, PartialEq)]
pub struct HashIndex {
    code_len: usize,
    entries: Vec<IndexEntry>,
    ids: HashSet<u64>,
}

impl HashIndex {
    pub fn new(code_len: usize) -> Self {
        Self {
            code_len,
            entries: Vec::new(),
            ids: HashSet::new(),
        }
    }

    pub fn code_len(&self) -> usize {
        self.code_len
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn insert(&mut self, id: u64, code: ActivationCode, label: usize) -> Result<()> {
        if code.len() != self.code_len {
            return Err(CodeError::Length {
                expected: self.code_len,
                got: code.len(),
            });
        }
        if !self.ids.insert(id) {
            return Err(CodeError::DuplicateId(id));
        }
        self.entries.push(IndexEntry { id, code, label });
        Ok(())
    }

    pub fn contains_label(&self, label: usize) -> bool {
        self.entries.iter().any(|e| e.label == label)
    }

    /// Every entry ordered by (Hamming distance, id).
    pub fn ranked(&self, code: &ActivationCode) -> Result<Vec<(&IndexEntry, usize)>> {
        if code.len() != self.code_len {
            return Err(CodeError::Length {
                expected: self.code_len,
                got: code.len(),
            });
        }
        let mut out: Vec<(&IndexEntry, usize)> = self
            .entries
            .iter()
            .map(|e| (e, hamming_by_count(&e.code, code)))
            .collect();
        out.sort_by_key(|(e, d)| (*d, e.id));
        Ok(out)
    }

    /// The `k` nearest ids; all ids when `k` exceeds the index size.
    pub fn query(&self, code: &ActivationCode, k: usize) -> Result<Vec<u64>> {
        if k == 0 {
            return Err(CodeError::ZeroK);
        }
        Ok(self
            .ranked(code)?
            .into_iter()
            .take(k)
            .map(|(e, _)| e.id)
            .collect())
    }

    /// One `id,label,bitstring` line per entry.
    pub fn export(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let _ = writeln!(out, "{},{},{}", e.id, e.label, e.code.to_bitstring());
        }
        out
    }

    /// Parses [`HashIndex::export`] output. An optional `id,label,...`
    /// header line and blank lines are ignored.
    pub fn import(text: &str) -> Result<Self> {
        let mut index: Option<HashIndex> = None;
        for (n, line) in text.lines().enumerate() {
            let line_no = n + 1;
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || (line_no == 1 && line.starts_with("id,")) {
                continue;
            }
            let parse_err = |msg: &str| CodeError::Parse {
                line: line_no,
                msg: msg.to_string(),
            };
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 3 {
                return Err(parse_err("expected id,label,bitstring"));
            }
            let id: u64 = fields[0].trim().parse().map_err(|_| parse_err("invalid id"))?;
            let label: usize = fields[1].trim().parse().map_err(|_| parse_err("invalid label"))?;
            let code = ActivationCode::from_bitstring(fields[2].trim())
                .ok_or_else(|| parse_err("bitstring must contain only 0 and 1"))?;
            if code.is_empty() {
                return Err(parse_err("empty bitstring"));
            }
            let idx = index.get_or_insert_with(|| HashIndex::new(code.len()));
            idx.insert(id, code, label).map_err(|e| CodeError::Parse {
                line: line_no,
                msg: e.to_string(),
            })?;
        }
        index.ok_or(CodeError::Parse {
            line: 0,
            msg: "no entries".into(),
        })
    }
}

/// Mean over relevant ranks of precision at that rank.
pub fn average_precision(relevance: impl IntoIterator<Item = bool>) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, rel) in relevance.into_iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapReport {
    pub map: f64,
    pub evaluated: usize,
    /// Queries whose class is absent from the index.
    pub skipped: usize,
}

/// Mean average precision over the full Hamming-ranked list, where an
/// entry is relevant when it shares the query's label.
pub fn mean_average_precision(index: &HashIndex, queries: &[(ActivationCode, usize)]) -> Result<MapReport> {
    let mut total = 0.0;
    let mut evaluated = 0;
    let mut skipped = 0;
    for (code, label) in queries {
        let ranked = index.ranked(code)?;
        match average_precision(ranked.iter().map(|(e, _)| e.label == *label)) {
            Some(ap) => {
                total += ap;
                evaluated += 1;
            }
            None => skipped += 1,
        }
    }
    Ok(MapReport {
        map: if evaluated > 0 { total / evaluated as f64 } else { 0.0 },
        evaluated,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn code(bits: &[i8]) -> ActivationCode {
        ActivationCode::new(bits.to_vec()).unwrap()
    }

    #[test]
    fn sign_code_ties_to_plus() {
        assert_eq!(sign_code(&[0.3, -0.1, 0.0]).unwrap(), code(&[1, -1, 1]));
        assert_eq!(sign_code(&[1.0, f64::NAN]), Err(CodeError::NotANumber(1)));
        assert!(ActivationCode::new(vec![1, 0]).is_err());
    }

    #[test]
    fn hamming_examples() {
        let a = code(&[1, -1, 1, 1, -1, 1, -1]);
        let neg = ActivationCode::new(a.bits().iter().map(|b| -b).collect()).unwrap();
        assert_eq!(hamming(&a, &a).unwrap(), 0);
        assert_eq!(hamming(&a, &neg).unwrap(), 7);
        let x = code(&[1, 1, -1, -1]);
        let y = code(&[1, -1, 1, -1]);
        assert_eq!(x.dot(&y).unwrap(), 0);
        assert_eq!(hamming(&x, &y).unwrap(), 2);
        assert_eq!(hamming_by_count(&x, &y), 2);
        assert!(hamming(&x, &a).is_err());
    }

    #[test]
    fn avg_hamming_examples() {
        let a = code(&[1, 1, 1, 1, 1]);
        let b = code(&[-1, -1, -1, -1, -1]);
        assert_eq!(avg_hamming(&[a.clone(), b]).unwrap(), 5.0);
        assert_eq!(avg_hamming(&[a.clone(), a.clone(), a.clone()]).unwrap(), 0.0);
        assert!(avg_hamming(&[a]).is_err());

        // brute force over the 12 ordered pairs of {++, +-, -+, --}
        let book: Vec<ActivationCode> = [[1, 1], [1, -1], [-1, 1], [-1, -1]].iter().map(|c| code(c)).collect();
        let mut sum = 0;
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    sum += hamming_by_count(&book[i], &book[j]);
                }
            }
        }
        assert_eq!(sum, 16);
        assert!((avg_hamming(&book).unwrap() - 4.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn bitstring_and_mask_round_trip() {
        let c = code(&[1, -1, -1, 1]);
        assert_eq!(c.to_bitstring(), "1001");
        assert_eq!(ActivationCode::from_bitstring("1001").unwrap(), c);
        assert!(ActivationCode::from_bitstring("10x1").is_none());
        assert_eq!(ActivationCode::from_mask(c.to_mask(), 4), c);
    }

    fn three_entry_index() -> HashIndex {
        let mut idx = HashIndex::new(4);
        idx.insert(10, code(&[1, 1, 1, 1]), 0).unwrap();
        idx.insert(3, code(&[1, 1, -1, -1]), 1).unwrap();
        idx.insert(7, code(&[-1, 1, 1, 1]), 0).unwrap();
        idx
    }

    #[test]
    fn query_ranking() {
        let idx = three_entry_index();
        // query ++++ : distances id10 -> 0, id7 -> 1, id3 -> 2
        assert_eq!(idx.query(&code(&[1, 1, 1, 1]), 3).unwrap(), vec![10, 7, 3]);
        // query -+-+ : id10 -> 2, id3 -> 2, id7 -> 1
        assert_eq!(idx.query(&code(&[-1, 1, -1, 1]), 5).unwrap(), vec![7, 3, 10]);
        assert_eq!(idx.query(&code(&[1, 1, -1, -1]), 1).unwrap(), vec![3]);
        assert!(idx.query(&code(&[1, 1]), 1).is_err());
        assert_eq!(idx.query(&code(&[1, 1, 1, 1]), 0), Err(CodeError::ZeroK));
    }

    #[test]
    fn equal_distance_breaks_ties_by_id() {
        let mut idx = HashIndex::new(2);
        idx.insert(9, code(&[1, -1]), 0).unwrap();
        idx.insert(2, code(&[-1, 1]), 0).unwrap();
        assert_eq!(idx.query(&code(&[1, 1]), 2).unwrap(), vec![2, 9]);
    }

    #[test]
    fn index_rejects_duplicates_and_wrong_lengths() {
        let mut idx = three_entry_index();
        assert_eq!(idx.insert(3, code(&[1, 1, 1, 1]), 0), Err(CodeError::DuplicateId(3)));
        assert!(idx.insert(4, code(&[1]), 0).is_err());
    }

    #[test]
    fn export_import_round_trip() {
        let idx = three_entry_index();
        let text = idx.export();
        assert_eq!(text, "10,0,1111\n3,1,1100\n7,0,0111\n");
        assert_eq!(HashIndex::import(&text).unwrap(), idx);
        assert_eq!(HashIndex::import(&format!("id,label,bits\n{text}")).unwrap(), idx);
        assert!(matches!(
            HashIndex::import("1,0,11\n2,0,1\n"),
            Err(CodeError::Parse { line: 2, .. })
        ));
        assert!(HashIndex::import("").is_err());
    }

    #[test]
    fn average_precision_examples() {
        let ap = average_precision([true, false, true]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert_eq!(average_precision([true, true]), Some(1.0));
        assert_eq!(average_precision([false, false]), None);
    }

    #[test]
    fn map_single_query_hand_computed() {
        let idx = three_entry_index();
        // query -+-+ label 0: ranking 7 (rel), 3 (non), 10 (rel) -> AP = (1 + 2/3)/2
        let r = mean_average_precision(&idx, &[(code(&[-1, 1, -1, 1]), 0)]).unwrap();
        assert!((r.map - 5.0 / 6.0).abs() < 1e-15);
        let r = mean_average_precision(&idx, &[(code(&[1, 1, 1, 1]), 4)]).unwrap();
        assert_eq!((r.evaluated, r.skipped), (0, 1));
    }

    #[test]
    fn map_all_relevant_is_one() {
        let mut idx = HashIndex::new(3);
        for id in 0..5 {
            idx.insert(id, ActivationCode::from_mask(id, 3), 2).unwrap();
        }
        let r = mean_average_precision(&idx, &[(code(&[1, 1, 1]), 2), (code(&[-1, 1, -1]), 2)]).unwrap();
        assert_eq!(r.map, 1.0);
    }

    fn arb_code(d: usize) -> impl Strategy<Value = ActivationCode> {
        proptest::collection::vec(any::<bool>(), d).prop_map(ActivationCode::from_bools)
    }

    proptest! {
        #[test]
        fn hamming_is_a_metric(d in 1usize..=8, seed in any::<u64>()) {
            let a = ActivationCode::from_mask(seed, d);
            let b = ActivationCode::from_mask(seed >> 8, d);
            let c = ActivationCode::from_mask(seed >> 16, d);
            let ab = hamming(&a, &b).unwrap();
            prop_assert_eq!(ab, hamming(&b, &a).unwrap());
            prop_assert_eq!(ab == 0, a == b);
            prop_assert!(hamming(&a, &c).unwrap() <= ab + hamming(&b, &c).unwrap());
            prop_assert_eq!(ab, hamming_by_count(&a, &b));
        }

        #[test]
        fn avg_hamming_ignores_bit_permutations(
            book in proptest::collection::vec(arb_code(6), 2..6),
            perm in Just((0..6).collect::<Vec<usize>>()).prop_shuffle(),
        ) {
            let permuted: Vec<ActivationCode> = book
                .iter()
                .map(|c| ActivationCode::new(perm.iter().map(|&p| c.bits()[p]).collect()).unwrap())
                .collect();
            prop_assert_eq!(avg_hamming(&book).unwrap(), avg_hamming(&permuted).unwrap());
        }

        #[test]
        fn ranking_is_total_and_stable(book in proptest::collection::vec(arb_code(5), 1..20), q in arb_code(5)) {
            let mut idx = HashIndex::new(5);
            for (i, c) in book.iter().enumerate() {
                idx.insert((i * 7 % 23) as u64, c.clone(), i % 3).unwrap();
            }
            let r1 = idx.query(&q, book.len()).unwrap();
            let r2 = idx.query(&q, book.len() + 3).unwrap();
            prop_assert_eq!(&r1, &r2);
            let keys: Vec<(usize, u64)> = idx.ranked(&q).unwrap().iter().map(|(e, d)| (*d, e.id)).collect();
            prop_assert!(keys.windows(2).all(|w| w[0] < w[1]));
        }
    }
}
