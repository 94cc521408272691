//! Interaction data: the sparse binary user-item matrix, degree statistics,
//! symmetric normalization, low-popularity item sets and perturbation records.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sparse binary user-item matrix stored in both row (user) and column (item)
/// compressed form. Index lists are sorted and duplicate free.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionMatrix {
    num_users: usize,
    num_items: usize,
    user_ptr: Vec<usize>,
    user_idx: Vec<u32>,
    item_ptr: Vec<usize>,
    item_idx: Vec<u32>,
}

impl InteractionMatrix {
    /// Builds a matrix from `(user, item)` pairs. Duplicates are dropped.
    pub fn from_pairs(
        num_users: usize,
        num_items: usize,
        pairs: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self> {
        if num_users == 0 || num_items == 0 {
            return Err(Error::InvalidArgument(
                "matrix needs at least one user and one item".into(),
            ));
        }
        let mut rows: Vec<Vec<u32>> = vec![Vec::new(); num_users];
        for (u, i) in pairs {
            if u >= num_users {
                return Err(Error::OutOfRange {
                    what: "user",
                    index: u,
                    limit: num_users,
                });
            }
            if i >= num_items {
                return Err(Error::OutOfRange {
                    what: "item",
                    index: i,
                    limit: num_items,
                });
            }
            rows[u].push(i as u32);
        }
        Ok(Self::from_rows(num_items, rows))
    }

    fn from_rows(num_items: usize, mut rows: Vec<Vec<u32>>) -> Self {
        let num_users = rows.len();
        let mut user_ptr = Vec::with_capacity(num_users + 1);
        let mut user_idx = Vec::new();
        user_ptr.push(0);
        for row in rows.iter_mut() {
            row.sort_unstable();
            row.dedup();
            user_idx.extend_from_slice(row);
            user_ptr.push(user_idx.len());
        }

        let mut counts = vec![0usize; num_items];
        for &i in &user_idx {
            counts[i as usize] += 1;
        }
        let mut item_ptr = Vec::with_capacity(num_items + 1);
        item_ptr.push(0);
        for c in &counts {
            item_ptr.push(item_ptr.last().unwrap() + c);
        }
        let mut fill = item_ptr[..num_items].to_vec();
        let mut item_idx = vec![0u32; user_idx.len()];
        // users are visited in ascending order, so each column comes out sorted
        for u in 0..num_users {
            for &i in &user_idx[user_ptr[u]..user_ptr[u + 1]] {
                item_idx[fill[i as usize]] = u as u32;
                fill[i as usize] += 1;
            }
        }

        Self {
            num_users,
            num_items,
            user_ptr,
            user_idx,
            item_ptr,
            item_idx,
        }
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    /// Number of stored interactions, |E|.
    pub fn nnz(&self) -> usize {
        self.user_idx.len()
    }

    /// Items the user interacted with, ascending.
    pub fn user_items(&self, u: usize) -> &[u32] {
        &self.user_idx[self.user_ptr[u]..self.user_ptr[u + 1]]
    }

    /// Users who interacted with the item, ascending.
    pub fn item_users(&self, i: usize) -> &[u32] {
        &self.item_idx[self.item_ptr[i]..self.item_ptr[i + 1]]
    }

    pub fn user_degree(&self, u: usize) -> usize {
        self.user_ptr[u + 1] - self.user_ptr[u]
    }

    pub fn item_degree(&self, i: usize) -> usize {
        self.item_ptr[i + 1] - self.item_ptr[i]
    }

    pub fn contains(&self, u: usize, i: usize) -> bool {
        u < self.num_users
            && i < self.num_items
            && self.user_items(u).binary_search(&(i as u32)).is_ok()
    }

    /// All stored pairs in row-major order.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.num_users)
            .flat_map(move |u| self.user_items(u).iter().map(move |&i| (u, i as usize)))
    }

    pub(crate) fn user_ptr(&self) -> &[usize] {
        &self.user_ptr
    }

    pub(crate) fn user_idx(&self) -> &[u32] {
        &self.user_idx
    }

    pub(crate) fn item_ptr(&self) -> &[usize] {
        &self.item_ptr
    }

    pub(crate) fn item_idx(&self) -> &[u32] {
        &self.item_idx
    }

    /// Returns a copy with the extra pairs added. Existing pairs are kept once.
    pub fn with_pairs(&self, extra: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut rows: Vec<Vec<u32>> = (0..self.num_users)
            .map(|u| self.user_items(u).to_vec())
            .collect();
        for (u, i) in extra {
            if u >= self.num_users {
                return Err(Error::OutOfRange {
                    what: "user",
                    index: u,
                    limit: self.num_users,
                });
            }
            if i >= self.num_items {
                return Err(Error::OutOfRange {
                    what: "item",
                    index: i,
                    limit: self.num_items,
                });
            }
            rows[u].push(i as u32);
        }
        Ok(Self::from_rows(self.num_items, rows))
    }

    /// Dense 0/1 copy, for tests and small reference computations.
    pub fn to_dense(&self) -> ndarray::Array2<f64> {
        let mut dense = ndarray::Array2::zeros((self.num_users, self.num_items));
        for (u, i) in self.pairs() {
            dense[[u, i]] = 1.0;
        }
        dense
    }
}

/// Parses the whitespace separated `user item item ...` format. A comment
/// line `# dims <users> <items>` overrides the inferred dimensions.
pub fn parse_interactions(text: &str) -> Result<InteractionMatrix> {
    let mut pairs = Vec::new();
    let mut max_user: Option<usize> = None;
    let mut max_item: Option<usize> = None;
    let mut dims: Option<(usize, usize)> = None;

    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            let mut tokens = comment.split_whitespace();
            if tokens.next() == Some("dims") {
                let parse = |tok: Option<&str>| -> Result<usize> {
                    tok.and_then(|t| t.parse().ok())
                        .ok_or_else(|| Error::Parse {
                            line: lineno + 1,
                            message: "expected `# dims <users> <items>`".into(),
                        })
                };
                dims = Some((parse(tokens.next())?, parse(tokens.next())?));
            }
            continue;
        }
        let mut tokens = line.split_whitespace();
        let parse = |tok: &str| -> Result<usize> {
            tok.parse::<usize>().map_err(|_| Error::Parse {
                line: lineno + 1,
                message: format!("invalid id `{tok}`"),
            })
        };
        let user = parse(tokens.next().unwrap())?;
        max_user = Some(max_user.map_or(user, |m| m.max(user)));
        for tok in tokens {
            let item = parse(tok)?;
            max_item = Some(max_item.map_or(item, |m| m.max(item)));
            pairs.push((user, item));
        }
    }

    let inferred_users = max_user.map_or(0, |m| m + 1);
    let inferred_items = max_item.map_or(0, |m| m + 1);
    let (num_users, num_items) = match dims {
        Some((m, n)) => {
            if m < inferred_users || n < inferred_items {
                return Err(Error::Parse {
                    line: 0,
                    message: format!(
                        "dims header {m}x{n} smaller than ids seen ({inferred_users}x{inferred_items})"
                    ),
                });
            }
            (m, n)
        }
        None => (inferred_users, inferred_items),
    };
    if num_users == 0 || num_items == 0 {
        return Err(Error::EmptyDataset("no interactions found".into()));
    }
    InteractionMatrix::from_pairs(num_users, num_items, pairs)
}

pub fn load_interactions(path: impl AsRef<Path>) -> Result<InteractionMatrix> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_interactions(&text).map_err(|e| match e {
        Error::EmptyDataset(_) => Error::EmptyDataset(path.display().to_string()),
        other => other,
    })
}

pub fn save_interactions(path: impl AsRef<Path>, matrix: &InteractionMatrix) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let write = |out: &mut BufWriter<fs::File>| -> std::io::Result<()> {
        writeln!(out, "# dims {} {}", matrix.num_users(), matrix.num_items())?;
        for u in 0..matrix.num_users() {
            let items = matrix.user_items(u);
            if items.is_empty() {
                continue;
            }
            write!(out, "{u}")?;
            for i in items {
                write!(out, " {i}")?;
            }
            writeln!(out)?;
        }
        out.flush()
    };
    write(&mut out).map_err(|e| Error::io(path, e))
}

/// Row and column counts of an interaction matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DegreeProfile {
    pub user_degrees: Vec<usize>,
    pub item_degrees: Vec<usize>,
    /// |E| / N.
    pub mean_item_degree: f64,
}

pub fn compute_degrees(matrix: &InteractionMatrix) -> DegreeProfile {
    let user_degrees = (0..matrix.num_users())
        .map(|u| matrix.user_degree(u))
        .collect();
    let item_degrees = (0..matrix.num_items())
        .map(|i| matrix.item_degree(i))
        .collect();
    DegreeProfile {
        user_degrees,
        item_degrees,
        mean_item_degree: matrix.nnz() as f64 / matrix.num_items() as f64,
    }
}

/// `max(deg, 1)^(-1/2)`; cold nodes are treated as degree one.
#[inline]
pub fn inv_sqrt_degree(degree: f64) -> f64 {
    1.0 / degree.max(1.0).sqrt()
}

/// `Λ_L^{-1/2} R Λ_R^{-1/2}` over the sparsity pattern of `R`.
#[derive(Debug, Clone)]
pub struct NormalizedMatrix<'a> {
    matrix: &'a InteractionMatrix,
    user_scale: Vec<f64>,
    item_scale: Vec<f64>,
    row_weights: Vec<f64>,
    col_weights: Vec<f64>,
}

pub fn normalize<'a>(
    matrix: &'a InteractionMatrix,
    degrees: &DegreeProfile,
) -> NormalizedMatrix<'a> {
    let user_scale: Vec<f64> = degrees
        .user_degrees
        .iter()
        .map(|&d| inv_sqrt_degree(d as f64))
        .collect();
    let item_scale: Vec<f64> = degrees
        .item_degrees
        .iter()
        .map(|&d| inv_sqrt_degree(d as f64))
        .collect();

    let mut row_weights = Vec::with_capacity(matrix.nnz());
    for u in 0..matrix.num_users() {
        for &i in matrix.user_items(u) {
            row_weights.push(user_scale[u] * item_scale[i as usize]);
        }
    }
    let mut col_weights = Vec::with_capacity(matrix.nnz());
    for i in 0..matrix.num_items() {
        for &u in matrix.item_users(i) {
            col_weights.push(user_scale[u as usize] * item_scale[i]);
        }
    }

    NormalizedMatrix {
        matrix,
        user_scale,
        item_scale,
        row_weights,
        col_weights,
    }
}

impl<'a> NormalizedMatrix<'a> {
    pub fn from_matrix(matrix: &'a InteractionMatrix) -> Self {
        normalize(matrix, &compute_degrees(matrix))
    }

    pub fn matrix(&self) -> &'a InteractionMatrix {
        self.matrix
    }

    pub fn num_users(&self) -> usize {
        self.matrix.num_users()
    }

    pub fn num_items(&self) -> usize {
        self.matrix.num_items()
    }

    /// `max(deg(u),1)^(-1/2)`.
    pub fn user_scale(&self) -> &[f64] {
        &self.user_scale
    }

    /// `max(deg(i),1)^(-1/2)`.
    pub fn item_scale(&self) -> &[f64] {
        &self.item_scale
    }

    /// Stored weight, `None` outside the sparsity pattern.
    pub fn weight(&self, u: usize, i: usize) -> Option<f64> {
        let ptr = self.matrix.user_ptr();
        let items = self.matrix.user_items(u);
        items
            .binary_search(&(i as u32))
            .ok()
            .map(|k| self.row_weights[ptr[u] + k])
    }

    /// Row `u` as `(item, weight)` pairs.
    pub fn row(&self, u: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let ptr = self.matrix.user_ptr();
        let range = ptr[u]..ptr[u + 1];
        self.matrix.user_idx()[range.clone()]
            .iter()
            .zip(&self.row_weights[range])
            .map(|(&i, &w)| (i as usize, w))
    }

    /// Column `i` as `(user, weight)` pairs.
    pub fn column(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let ptr = self.matrix.item_ptr();
        let range = ptr[i]..ptr[i + 1];
        self.matrix.item_idx()[range.clone()]
            .iter()
            .zip(&self.col_weights[range])
            .map(|(&u, &w)| (u as usize, w))
    }
}

/// Item-degree percentile bucket: the degree at the percentile rank and every
/// item sharing that degree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ItemPercentile {
    pub threshold: usize,
    pub items: Vec<usize>,
}

/// Degree of the item at ascending rank `floor(q/100 * (N-1))`.
pub fn percentile_degree(degrees: &DegreeProfile, q: f64) -> Result<usize> {
    if !(0.0..=100.0).contains(&q) {
        return Err(Error::InvalidArgument(format!(
            "percentile {q} outside [0, 100]"
        )));
    }
    let n = degrees.item_degrees.len();
    if n == 0 {
        return Err(Error::EmptyDataset("no items".into()));
    }
    let mut sorted = degrees.item_degrees.clone();
    sorted.sort_unstable();
    let rank = ((q / 100.0) * (n - 1) as f64).floor() as usize;
    Ok(sorted[rank.min(n - 1)])
}

pub fn select_item_percentile(degrees: &DegreeProfile, q: f64) -> Result<ItemPercentile> {
    let threshold = percentile_degree(degrees, q)?;
    let items = degrees
        .item_degrees
        .iter()
        .enumerate()
        .filter(|(_, &d)| d == threshold)
        .map(|(i, _)| i)
        .collect();
    Ok(ItemPercentile { threshold, items })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BudgetVariant {
    /// `deg(Q65) - deg(Qs)`
    #[serde(rename = "1")]
    ToQ65,
    /// `round(mean degree) - deg(Qs)`
    #[serde(rename = "2")]
    ToMean,
}

impl BudgetVariant {
    pub fn from_index(index: u8) -> Result<Self> {
        match index {
            1 => Ok(BudgetVariant::ToQ65),
            2 => Ok(BudgetVariant::ToMean),
            other => Err(Error::InvalidArgument(format!(
                "budget variant must be 1 or 2, got {other}"
            ))),
        }
    }

    pub fn index(self) -> u8 {
        match self {
            BudgetVariant::ToQ65 => 1,
            BudgetVariant::ToMean => 2,
        }
    }
}

/// Perturbation budget for target items at percentile `s`, clamped to at least 1.
pub fn compute_budget(degrees: &DegreeProfile, s: f64, variant: BudgetVariant) -> Result<usize> {
    let base = percentile_degree(degrees, s)? as i64;
    let reference = match variant {
        BudgetVariant::ToQ65 => percentile_degree(degrees, 65.0)? as i64,
        BudgetVariant::ToMean => degrees.mean_item_degree.round() as i64,
    };
    Ok((reference - base).max(1) as usize)
}

/// Edge additions `(u, target_item)` proposed by an attack.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Perturbation {
    pub attack: String,
    pub target_item: usize,
    pub budget: usize,
    pub added_users: Vec<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl Perturbation {
    pub fn empty(attack: impl Into<String>, target_item: usize, budget: usize) -> Self {
        Self {
            attack: attack.into(),
            target_item,
            budget,
            added_users: Vec::new(),
            seed: None,
        }
    }

    /// Checks the record against the matrix it is meant to perturb.
    pub fn validate(&self, matrix: &InteractionMatrix) -> Result<()> {
        if self.target_item >= matrix.num_items() {
            return Err(Error::OutOfRange {
                what: "target item",
                index: self.target_item,
                limit: matrix.num_items(),
            });
        }
        if self.added_users.len() > self.budget {
            return Err(Error::InvalidPerturbation(format!(
                "{} edits exceed budget {}",
                self.added_users.len(),
                self.budget
            )));
        }
        let mut seen = std::collections::HashSet::with_capacity(self.added_users.len());
        for &u in &self.added_users {
            if u >= matrix.num_users() {
                return Err(Error::OutOfRange {
                    what: "user",
                    index: u,
                    limit: matrix.num_users(),
                });
            }
            if !seen.insert(u) {
                return Err(Error::InvalidPerturbation(format!("user {u} listed twice")));
            }
            if matrix.contains(u, self.target_item) {
                return Err(Error::InvalidPerturbation(format!(
                    "edge ({u}, {}) already present",
                    self.target_item
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn apply_perturbation(
    matrix: &InteractionMatrix,
    perturbation: &Perturbation,
) -> Result<InteractionMatrix> {
    perturbation.validate(matrix)?;
    let t = perturbation.target_item;
    matrix.with_pairs(perturbation.added_users.iter().map(|&u| (u, t)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small() -> InteractionMatrix {
        parse_interactions("0 0 1\n1 1\n").unwrap()
    }

    fn random_matrix(m: usize, n: usize, density: f64, seed: u64) -> InteractionMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pairs = Vec::new();
        for u in 0..m {
            for i in 0..n {
                if rng.random::<f64>() < density {
                    pairs.push((u, i));
                }
            }
        }
        InteractionMatrix::from_pairs(m, n, pairs).unwrap()
    }

    #[test]
    fn parses_lines() {
        let r = small();
        assert_eq!((r.num_users(), r.num_items()), (2, 2));
        assert_eq!(r.pairs().collect::<Vec<_>>(), vec![(0, 0), (0, 1), (1, 1)]);
    }

    #[test]
    fn dedups_repeated_items() {
        let r = parse_interactions("0 0 0").unwrap();
        assert_eq!(r.pairs().collect::<Vec<_>>(), vec![(0, 0)]);
    }

    #[test]
    fn malformed_token_reports_line() {
        let err = parse_interactions("0 1\n1 x\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let err = parse_interactions("0 -1\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn empty_input_is_error() {
        assert!(matches!(
            parse_interactions("\n\n"),
            Err(Error::EmptyDataset(_))
        ));
        assert!(parse_interactions("3\n").is_err());
    }

    #[test]
    fn dims_header_overrides() {
        let r = parse_interactions("# dims 5 7\n0 1\n").unwrap();
        assert_eq!((r.num_users(), r.num_items()), (5, 7));
        assert!(parse_interactions("# dims 1 1\n0 3\n").is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let r = random_matrix(17, 23, 0.2, 4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.txt");
        save_interactions(&path, &r).unwrap();
        let back = load_interactions(&path).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn degrees_small() {
        let d = compute_degrees(&small());
        assert_eq!(d.user_degrees, vec![2, 1]);
        assert_eq!(d.item_degrees, vec![1, 2]);
        assert_eq!(d.mean_item_degree, 1.5);

        let empty = InteractionMatrix::from_pairs(2, 2, []).unwrap();
        let d = compute_degrees(&empty);
        assert_eq!(d.user_degrees, vec![0, 0]);
        assert_eq!(d.item_degrees, vec![0, 0]);
        assert_eq!(d.mean_item_degree, 0.0);
    }

    #[test]
    fn degrees_match_dense_sums() {
        let r = random_matrix(50, 50, 0.15, 9);
        let dense = r.to_dense();
        let d = compute_degrees(&r);
        for u in 0..50 {
            assert_eq!(d.user_degrees[u] as f64, dense.row(u).sum());
        }
        for i in 0..50 {
            assert_eq!(d.item_degrees[i] as f64, dense.column(i).sum());
        }
    }

    #[test]
    fn normalization_small() {
        let r = small();
        let nm = NormalizedMatrix::from_matrix(&r);
        assert!((nm.weight(0, 0).unwrap() - 1.0 / 2f64.sqrt()).abs() < 1e-12);
        assert!((nm.weight(0, 1).unwrap() - 0.5).abs() < 1e-12);
        assert!((nm.weight(1, 1).unwrap() - 1.0 / 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(nm.weight(1, 0), None);

        let one = InteractionMatrix::from_pairs(1, 1, [(0, 0)]).unwrap();
        assert_eq!(NormalizedMatrix::from_matrix(&one).weight(0, 0), Some(1.0));
    }

    fn dense_normalized(r: &InteractionMatrix) -> Array2<f64> {
        let dense = r.to_dense();
        let (m, n) = dense.dim();
        let mut left = Array2::<f64>::zeros((m, m));
        let mut right = Array2::<f64>::zeros((n, n));
        for u in 0..m {
            left[[u, u]] = 1.0 / dense.row(u).sum().max(1.0).sqrt();
        }
        for i in 0..n {
            right[[i, i]] = 1.0 / dense.column(i).sum().max(1.0).sqrt();
        }
        left.dot(&dense).dot(&right)
    }

    #[test]
    fn normalization_matches_dense_product() {
        let r = random_matrix(30, 40, 0.2, 1);
        let nm = NormalizedMatrix::from_matrix(&r);
        let oracle = dense_normalized(&r);
        for u in 0..30 {
            for i in 0..40 {
                let got = nm.weight(u, i).unwrap_or(0.0);
                assert!((got - oracle[[u, i]]).abs() < 1e-12);
            }
        }
        // row and column views agree with point lookups
        for i in 0..40 {
            for (u, w) in nm.column(i) {
                assert_eq!(Some(w), nm.weight(u, i));
            }
        }
    }

    #[test]
    fn row_squared_weights_identity() {
        let r = random_matrix(40, 35, 0.1, 7);
        let nm = NormalizedMatrix::from_matrix(&r);
        let deg = compute_degrees(&r);
        for u in 0..40 {
            let sq: f64 = nm.row(u).map(|(_, w)| w * w).sum();
            let expect: f64 = r
                .user_items(u)
                .iter()
                .map(|&i| 1.0 / (deg.user_degrees[u] * deg.item_degrees[i as usize]) as f64)
                .sum();
            assert!((sq - expect).abs() < 1e-12);
            for (_, w) in nm.row(u) {
                assert!(w > 0.0 && w <= 1.0);
            }
        }
    }

    #[test]
    fn percentile_examples() {
        let d = DegreeProfile {
            user_degrees: vec![],
            item_degrees: vec![1, 2, 3, 4, 5],
            mean_item_degree: 3.0,
        };
        let p = select_item_percentile(&d, 50.0).unwrap();
        assert_eq!(
            p,
            ItemPercentile {
                threshold: 3,
                items: vec![2]
            }
        );

        let ties = DegreeProfile {
            user_degrees: vec![],
            item_degrees: vec![7, 7, 7],
            mean_item_degree: 7.0,
        };
        for q in [0.0, 10.0, 65.0, 100.0] {
            let p = select_item_percentile(&ties, q).unwrap();
            assert_eq!(
                p,
                ItemPercentile {
                    threshold: 7,
                    items: vec![0, 1, 2]
                }
            );
        }
        assert!(select_item_percentile(&d, 101.0).is_err());
        assert!(select_item_percentile(&d, -0.5).is_err());
    }

    #[test]
    fn percentile_matches_sort_oracle_on_power_law() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let item_degrees: Vec<usize> = (0..997)
            .map(|_| {
                let x: f64 = rng.random::<f64>().max(1e-9);
                (x.powf(-0.8)) as usize
            })
            .collect();
        let d = DegreeProfile {
            user_degrees: vec![],
            mean_item_degree: item_degrees.iter().sum::<usize>() as f64 / 997.0,
            item_degrees: item_degrees.clone(),
        };
        let mut order: Vec<usize> = (0..997).collect();
        order.sort_by_key(|&i| (item_degrees[i], i));
        let rank = (0.1f64 * 996.0).floor() as usize;
        let threshold = item_degrees[order[rank]];
        let expected: Vec<usize> = (0..997).filter(|&i| item_degrees[i] == threshold).collect();
        let p = select_item_percentile(&d, 10.0).unwrap();
        assert_eq!(p.threshold, threshold);
        assert_eq!(p.items, expected);
    }

    #[test]
    fn budget_clamps_to_one() {
        let d = DegreeProfile {
            user_degrees: vec![],
            item_degrees: vec![1, 2, 3, 4, 5],
            mean_item_degree: 3.0,
        };
        assert_eq!(compute_budget(&d, 50.0, BudgetVariant::ToMean).unwrap(), 1);
        // Q65 sits at rank floor(0.65 * 4) = 2, the same as the median here
        assert_eq!(compute_budget(&d, 50.0, BudgetVariant::ToQ65).unwrap(), 1);
        assert_eq!(compute_budget(&d, 0.0, BudgetVariant::ToQ65).unwrap(), 2);
        assert_eq!(compute_budget(&d, 0.0, BudgetVariant::ToMean).unwrap(), 2);
    }

    #[test]
    fn apply_single_and_empty() {
        let r = InteractionMatrix::from_pairs(2, 2, [(0, 0)]).unwrap();
        let p = Perturbation {
            attack: "test".into(),
            target_item: 1,
            budget: 1,
            added_users: vec![1],
            seed: None,
        };
        let out = apply_perturbation(&r, &p).unwrap();
        assert_eq!(out.pairs().collect::<Vec<_>>(), vec![(0, 0), (1, 1)]);
        assert_eq!(r.nnz(), 1);

        let same = apply_perturbation(&r, &Perturbation::empty("none", 1, 3)).unwrap();
        assert_eq!(same, r);
    }

    #[test]
    fn apply_rejects_existing_edge_and_overbudget() {
        let r = InteractionMatrix::from_pairs(3, 2, [(0, 1)]).unwrap();
        let mut p = Perturbation::empty("x", 1, 2);
        p.added_users = vec![0];
        assert!(matches!(
            apply_perturbation(&r, &p),
            Err(Error::InvalidPerturbation(_))
        ));
        p.added_users = vec![1, 2];
        p.budget = 1;
        assert!(apply_perturbation(&r, &p).is_err());
        p.budget = 2;
        p.added_users = vec![1, 1];
        assert!(apply_perturbation(&r, &p).is_err());
    }

    #[test]
    fn perturbation_file_round_trip() {
        let p = Perturbation {
            attack: "proposed".into(),
            target_item: 42,
            budget: 7,
            added_users: vec![3, 1, 9],
            seed: Some(11),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        p.save(&path).unwrap();
        let value: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        for key in ["attack", "target_item", "budget", "added_users", "seed"] {
            assert!(value.get(key).is_some(), "missing {key}");
        }
        assert_eq!(Perturbation::load(&path).unwrap(), p);
    }

    proptest! {
        #[test]
        fn perturbation_l0_distance_and_order_independence(
            seed in 0u64..1000,
            picks in proptest::collection::vec(0usize..12, 0..8),
        ) {
            let r = random_matrix(12, 6, 0.3, seed);
            let t = (seed % 6) as usize;
            let mut users: Vec<usize> = picks.into_iter().filter(|&u| !r.contains(u, t)).collect();
            users.sort_unstable();
            users.dedup();
            let p = Perturbation { attack: "p".into(), target_item: t, budget: users.len(), added_users: users.clone(), seed: None };
            let out = apply_perturbation(&r, &p).unwrap();
            let diff = (&out.to_dense() - &r.to_dense()).mapv(f64::abs).sum();
            prop_assert_eq!(diff as usize, users.len());

            let mut reversed = p.clone();
            reversed.added_users.reverse();
            prop_assert_eq!(apply_perturbation(&r, &reversed).unwrap(), out.clone());
            let again = apply_perturbation(&out, &Perturbation::empty("none", t, 1)).unwrap();
            prop_assert_eq!(again, out);
        }

        #[test]
        fn budget_variant_one_identity(seed in 0u64..500, s in 0.0f64..65.0) {
            let r = random_matrix(20, 30, 0.25, seed);
            let d = compute_degrees(&r);
            let delta = compute_budget(&d, s, BudgetVariant::ToQ65).unwrap();
            let base = percentile_degree(&d, s).unwrap();
            let q65 = percentile_degree(&d, 65.0).unwrap();
            if q65 > base {
                prop_assert_eq!(delta + base, q65);
            } else {
                prop_assert_eq!(delta, 1);
            }
        }
    }
}
