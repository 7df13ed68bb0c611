//! Ratings ingestion, item-item cosine similarity and ranking triples.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::loss::TripleSample;
use crate::matrix::DenseMatrix;

/// A user-item rating matrix with densely reindexed ids.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseRatings {
    n_users: usize,
    n_items: usize,
    /// `(user, item, rating)` in input order.
    entries: Vec<(usize, usize, f64)>,
    user_ids: Vec<u64>,
    item_ids: Vec<u64>,
    /// Per item, `(user, rating)` sorted by user.
    columns: Vec<Vec<(usize, f64)>>,
    /// Squared column norms.
    norms_sq: Vec<f64>,
}

impl SparseRatings {
    /// Builds from `(user id, item id, rating)` triples with arbitrary ids.
    /// Ids are mapped to `0..n` in increasing order of the original id.
    pub fn from_entries(raw: &[(u64, u64, f64)]) -> Result<Self> {
        let mut seen = HashSet::with_capacity(raw.len());
        for (n, &(u, i, _)) in raw.iter().enumerate() {
            if !seen.insert((u, i)) {
                return Err(Error::DuplicateRating { line: n + 1, user: u, item: i });
            }
        }
        Ok(SparseRatings::build(raw))
    }

    fn build(raw: &[(u64, u64, f64)]) -> Self {
        let user_ids: Vec<u64> = raw.iter().map(|e| e.0).collect::<BTreeSet<_>>().into_iter().collect();
        let item_ids: Vec<u64> = raw.iter().map(|e| e.1).collect::<BTreeSet<_>>().into_iter().collect();
        let uidx: HashMap<u64, usize> = user_ids.iter().enumerate().map(|(a, &b)| (b, a)).collect();
        let iidx: HashMap<u64, usize> = item_ids.iter().enumerate().map(|(a, &b)| (b, a)).collect();
        let entries: Vec<(usize, usize, f64)> = raw.iter().map(|&(u, i, r)| (uidx[&u], iidx[&i], r)).collect();
        let mut columns = vec![Vec::new(); item_ids.len()];
        for &(u, i, r) in &entries {
            columns[i].push((u, r));
        }
        for c in &mut columns {
            c.sort_by_key(|e| e.0);
        }
        let norms_sq = columns
            .iter()
            .map(|c| c.iter().map(|(_, r)| r * r).sum::<f64>())
            .collect();
        SparseRatings {
            n_users: user_ids.len(),
            n_items: item_ids.len(),
            entries,
            user_ids,
            item_ids,
            columns,
            norms_sq,
        }
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn entries(&self) -> &[(usize, usize, f64)] {
        &self.entries
    }

    /// Original id of dense user index `u`.
    pub fn user_id(&self, u: usize) -> u64 {
        self.user_ids[u]
    }

    /// Original id of dense item index `i`.
    pub fn item_id(&self, i: usize) -> u64 {
        self.item_ids[i]
    }

    pub fn column(&self, i: usize) -> &[(usize, f64)] {
        &self.columns[i]
    }
}

/// Loads a MovieLens-style `userId,movieId,rating,timestamp` file. The first
/// line is a header; the timestamp column is optional and ignored.
pub fn load_ratings_csv(path: &Path) -> Result<SparseRatings> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_ratings(&text)
}

/// Parses the contents of a ratings file.
pub fn parse_ratings(text: &str) -> Result<SparseRatings> {
    let mut raw = Vec::new();
    let mut first_line: HashMap<(u64, u64), usize> = HashMap::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let line_no = n + 1;
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < 3 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected at least 3 fields, found {}", fields.len()),
            });
        }
        let bad = |what: &str, v: &str| Error::Parse {
            line: line_no,
            message: format!("invalid {what} {v:?}"),
        };
        let user: u64 = fields[0].parse().map_err(|_| bad("userId", fields[0]))?;
        let item: u64 = fields[1].parse().map_err(|_| bad("movieId", fields[1]))?;
        let rating: f64 = fields[2].parse().map_err(|_| bad("rating", fields[2]))?;
        if !rating.is_finite() {
            return Err(bad("rating", fields[2]));
        }
        if first_line.insert((user, item), line_no).is_some() {
            return Err(Error::DuplicateRating { line: line_no, user, item });
        }
        raw.push((user, item, rating));
    }
    Ok(SparseRatings::build(&raw))
}

/// `g_i^T g_j / (||g_i|| ||g_j||)` over the item columns of `g`.
pub fn cosine_similarity(g: &SparseRatings, i: usize, j: usize) -> Result<f64> {
    for &c in &[i, j] {
        if c >= g.n_items {
            return Err(Error::IndexOutOfRange { index: c, dim: g.n_items });
        }
        if g.columns[c].is_empty() || !(g.norms_sq[c] > 0.0) {
            return Err(Error::EmptyColumn(c));
        }
    }
    if i == j {
        return Ok(1.0);
    }
    let (a, b) = (&g.columns[i], &g.columns[j]);
    let (mut p, mut q, mut dot) = (0, 0, 0.0);
    while p < a.len() && q < b.len() {
        match a[p].0.cmp(&b[q].0) {
            std::cmp::Ordering::Less => p += 1,
            std::cmp::Ordering::Greater => q += 1,
            std::cmp::Ordering::Equal => {
                dot += a[p].1 * b[q].1;
                p += 1;
                q += 1;
            }
        }
    }
    // one rounding in the denominator, so identical columns give exactly 1
    Ok(dot / (g.norms_sq[i] * g.norms_sq[j]).sqrt())
}

/// Item-item similarity lookups used to label triples.
pub trait SimilarityOracle {
    fn n_items(&self) -> usize;
    fn similarity(&self, i: usize, j: usize) -> Result<f64>;
}

impl SimilarityOracle for SparseRatings {
    fn n_items(&self) -> usize {
        self.n_items
    }

    fn similarity(&self, i: usize, j: usize) -> Result<f64> {
        cosine_similarity(self, i, j)
    }
}

impl SimilarityOracle for DenseMatrix {
    fn n_items(&self) -> usize {
        self.n()
    }

    fn similarity(&self, i: usize, j: usize) -> Result<f64> {
        if i.max(j) >= self.n() {
            return Err(Error::IndexOutOfRange { index: i.max(j), dim: self.n() });
        }
        Ok(self.get(i, j))
    }
}

/// Bounded memo of symmetric similarity lookups. When full, the memo is
/// cleared and refilled.
pub struct SimilarityCache<'a, O: SimilarityOracle + ?Sized> {
    oracle: &'a O,
    capacity: usize,
    memo: HashMap<(usize, usize), Option<f64>>,
}

impl<'a, O: SimilarityOracle + ?Sized> SimilarityCache<'a, O> {
    pub fn new(oracle: &'a O, capacity: usize) -> Self {
        SimilarityCache {
            oracle,
            capacity: capacity.max(1),
            memo: HashMap::new(),
        }
    }

    /// The similarity, or `None` when it is undefined (empty column).
    pub fn get(&mut self, i: usize, j: usize) -> Result<Option<f64>> {
        let key = (i.min(j), i.max(j));
        if let Some(v) = self.memo.get(&key) {
            return Ok(*v);
        }
        let v = match self.oracle.similarity(key.0, key.1) {
            Ok(v) => Some(v),
            Err(Error::EmptyColumn(_)) => None,
            Err(e) => return Err(e),
        };
        if self.memo.len() >= self.capacity {
            self.memo.clear();
        }
        self.memo.insert(key, v);
        Ok(v)
    }
}

/// Default number of cached similarity pairs.
pub const DEFAULT_CACHE_PAIRS: usize = 1 << 20;

/// Draws `(i, j, k)` uniformly from `[d]^3` and keeps distinct triples with
/// `M_ij != M_ik`, labeled `Y = [M_ij > M_ik]`. Triples with `i = j` or
/// `i = k` are allowed.
///
/// Gives up with [`Error::InsufficientTriples`] after
/// `64 * count + 100_000` draws.
pub fn build_triples<O: SimilarityOracle + ?Sized>(oracle: &O, count: usize, seed: u64) -> Result<Vec<TripleSample>> {
    if count == 0 {
        return Err(Error::InvalidConfig("triple count must be >= 1".into()));
    }
    let d = oracle.n_items();
    if d < 2 {
        return Err(Error::InsufficientTriples { requested: count, found: 0 });
    }
    let mut cache = SimilarityCache::new(oracle, DEFAULT_CACHE_PAIRS);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::with_capacity(count);
    let mut out = Vec::with_capacity(count);
    let budget = 64u64.saturating_mul(count as u64).saturating_add(100_000);
    let mut attempts = 0u64;
    while out.len() < count {
        if attempts >= budget {
            return Err(Error::InsufficientTriples { requested: count, found: out.len() });
        }
        attempts += 1;
        let (i, j, k) = (rng.random_range(0..d), rng.random_range(0..d), rng.random_range(0..d));
        if j == k || seen.contains(&(i, j, k)) {
            continue;
        }
        let (Some(mij), Some(mik)) = (cache.get(i, j)?, cache.get(i, k)?) else {
            continue;
        };
        if mij == mik {
            continue;
        }
        seen.insert((i, j, k));
        out.push(TripleSample { i, j, k, y: mij > mik });
    }
    Ok(out)
}

/// Disjoint random train and test subsets of the given sizes.
pub fn split(
    omega: &[TripleSample],
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<(Vec<TripleSample>, Vec<TripleSample>)> {
    let want = n_train.saturating_add(n_test);
    if want > omega.len() {
        return Err(Error::SizeOverflow { requested: want, available: omega.len() });
    }
    let mut idx: Vec<usize> = (0..omega.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let train = idx[..n_train].iter().map(|&a| omega[a]).collect();
    let test = idx[n_train..want].iter().map(|&a| omega[a]).collect();
    Ok((train, test))
}

/// Writes one `i j k y` record per line, `y` as `0` or `1`.
pub fn write_triples(path: &Path, triples: &[TripleSample]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for t in triples {
        writeln!(w, "{} {} {} {}", t.i, t.j, t.k, u8::from(t.y)).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads the format produced by [`write_triples`]. Blank lines are skipped.
pub fn read_triples(path: &Path) -> Result<Vec<TripleSample>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_triples(&text)
}

pub fn parse_triples(text: &str) -> Result<Vec<TripleSample>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse { line: n + 1, message };
        if f.len() != 4 {
            return Err(err(format!("expected 4 fields, found {}", f.len())));
        }
        let idx = |s: &str| s.parse::<usize>().map_err(|_| err(format!("invalid index {s:?}")));
        let y = match f[3] {
            "0" => false,
            "1" => true,
            other => return Err(err(format!("invalid label {other:?}"))),
        };
        let t = TripleSample { i: idx(f[0])?, j: idx(f[1])?, k: idx(f[2])?, y };
        if t.j == t.k {
            return Err(err("j equals k".into()));
        }
        out.push(t);
    }
    Ok(out)
}
