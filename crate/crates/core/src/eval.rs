//! Encoder-only retrieval evaluation: embeddings, distances, mAP and CMC.
//!
//! Nothing here reads pose landmarks; only images and labels are used.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::models::Networks;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Images per encoder call during extraction.
const EXTRACT_CHUNK: usize = 64;

/// One embedding per sample, with labels aligned by row.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    /// `(N, d)`.
    pub rows: Tensor<f64>,
    pub names: Vec<String>,
    pub identities: Vec<usize>,
    pub cameras: Vec<usize>,
    /// Set when every sample came from the same split.
    pub split: Option<Split>,
    pub normalized: bool,
}

impl EmbeddingMatrix {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.rows.data()[i * d..(i + 1) * d]
    }

    /// Scales every row to unit L2 norm (zero rows stay zero).
    pub fn normalize(&mut self) {
        let d = self.dim();
        for row in self.rows.data_mut().chunks_mut(d) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
        self.normalized = true;
    }

    /// Text export: a `#` header line, then `name,identity,camera,v0,v1,...` rows.
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "# dim={} count={} normalized={}", self.dim(), self.len(), self.normalized)?;
        for i in 0..self.len() {
            let mut line = format!("{},{},{}", self.names[i], self.identities[i], self.cameras[i]);
            for v in self.row(i) {
                write!(line, ",{v:e}").unwrap();
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self> {
        let bad = |msg: String| Error::Parse { what: "embedding file".into(), msg };
        let mut lines = r.lines();
        let header = lines.next().ok_or_else(|| bad("empty file".into()))??;
        let mut dim = None;
        let mut count = None;
        let mut normalized = None;
        for field in header.trim_start_matches('#').split_whitespace() {
            match field.split_once('=') {
                Some(("dim", v)) => dim = v.parse::<usize>().ok(),
                Some(("count", v)) => count = v.parse::<usize>().ok(),
                Some(("normalized", v)) => normalized = v.parse::<bool>().ok(),
                _ => return Err(bad(format!("unexpected header field `{field}`"))),
            }
        }
        let (Some(dim), Some(count), Some(normalized)) = (dim, count, normalized) else {
            return Err(bad("header must be `# dim=<d> count=<n> normalized=<bool>`".into()));
        };
        let mut m = EmbeddingMatrix { rows: Tensor::zeros(&[0]), names: vec![], identities: vec![], cameras: vec![], split: None, normalized };
        let mut data = Vec::with_capacity(dim * count);
        for (k, line) in lines.enumerate() {
            let line = line?;
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != dim + 3 {
                return Err(bad(format!("row {}: expected {} columns, got {}", k + 1, dim + 3, cols.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("row {}: {e}", k + 1)));
            m.names.push(cols[0].to_string());
            m.identities.push(cols[1].parse().map_err(|e| bad(format!("row {}: {e}", k + 1)))?);
            m.cameras.push(cols[2].parse().map_err(|e| bad(format!("row {}: {e}", k + 1)))?);
            for c in &cols[3..] {
                data.push(num(c)?);
            }
        }
        if m.names.len() != count {
            return Err(bad(format!("header says {count} rows, found {}", m.names.len())));
        }
        m.rows = Tensor::from_vec(&[count, dim], data)?;
        Ok(m)
    }
}

/// Eval-mode encoder embeddings of every sample in `ds`.
pub fn extract_embeddings<S: Scalar>(nets: &mut Networks<S>, ds: &Dataset, normalize: bool) -> Result<EmbeddingMatrix> {
    if ds.is_empty() {
        return Err(Error::InvalidArgument("no samples to embed".into()));
    }
    let index: Vec<usize> = (0..ds.len()).collect();
    let mut data = Vec::new();
    for chunk in index.chunks(EXTRACT_CHUNK) {
        let e = nets.encode(&ds.images::<S>(chunk))?;
        data.extend(e.data().iter().map(|v| v.as_f64()));
    }
    let first = ds.samples[0].split;
    let mut m = EmbeddingMatrix {
        rows: Tensor::from_vec(&[ds.len(), nets.config.embed_dim], data)?,
        names: ds.samples.iter().map(|s| s.name.clone()).collect(),
        identities: ds.samples.iter().map(|s| s.identity).collect(),
        cameras: ds.samples.iter().map(|s| s.camera).collect(),
        split: ds.samples.iter().all(|s| s.split == first).then_some(first),
        normalized: false,
    };
    if normalize {
        m.normalize();
    }
    Ok(m)
}

/// `(Q, G)` squared Euclidean distances.
pub fn distance_matrix(queries: &EmbeddingMatrix, gallery: &EmbeddingMatrix) -> Result<Tensor<f64>> {
    if queries.dim() != gallery.dim() {
        return Err(Error::InvalidArgument(format!("embedding dims differ: {} vs {}", queries.dim(), gallery.dim())));
    }
    let (q, g) = (queries.len(), gallery.len());
    let mut out = Vec::with_capacity(q * g);
    for i in 0..q {
        let a = queries.row(i);
        for j in 0..g {
            out.push(a.iter().zip(gallery.row(j)).map(|(x, y)| (x - y) * (x - y)).sum());
        }
    }
    Tensor::from_vec(&[q, g], out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Protocol {
    /// Drop gallery entries sharing both identity and camera with the query.
    pub junk_same_camera: bool,
    /// Length of the reported CMC curve.
    pub max_rank: usize,
}

impl Default for Protocol {
    fn default() -> Self {
        Self { junk_same_camera: true, max_rank: 20 }
    }
}

/// Identity and camera of each row.
#[derive(Clone, Copy, Debug)]
pub struct Labels<'a> {
    pub identities: &'a [usize],
    pub cameras: &'a [usize],
}

impl<'a> From<&'a EmbeddingMatrix> for Labels<'a> {
    fn from(m: &'a EmbeddingMatrix) -> Self {
        Labels { identities: &m.identities, cameras: &m.cameras }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(rename = "mAP")]
    pub map: f64,
    /// `cmc[k-1]` is the top-k accuracy.
    pub cmc: Vec<f64>,
    /// Average precision per query; `None` for queries without a relevant entry.
    pub average_precision: Vec<Option<f64>>,
    pub excluded_queries: usize,
    /// Adjacent ranked entries with exactly equal distance, summed over queries.
    pub ties: usize,
    pub queries: usize,
    pub gallery: usize,
    pub protocol: Protocol,
}

impl EvalReport {
    pub fn top(&self, k: usize) -> f64 {
        self.cmc[(k.min(self.cmc.len())).max(1) - 1]
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        writeln!(s, "queries {}  gallery {}  excluded {}  ties {}", self.queries, self.gallery, self.excluded_queries, self.ties).unwrap();
        writeln!(s, "mAP     {:6.2}%", 100.0 * self.map).unwrap();
        for k in [1, 5, 10, 20] {
            if k <= self.cmc.len() {
                writeln!(s, "top-{k:<3} {:6.2}%", 100.0 * self.cmc[k - 1]).unwrap();
            }
        }
        s
    }
}

fn check_labels(dist: &Tensor<f64>, q: Labels, g: Labels, protocol: &Protocol) -> Result<(usize, usize)> {
    let s = dist.shape();
    if s.len() != 2 || s[0] == 0 || s[1] == 0 {
        return Err(Error::InvalidArgument(format!("need a nonempty (Q, G) distance matrix, got {s:?}")));
    }
    if q.identities.len() != s[0] || q.cameras.len() != s[0] || g.identities.len() != s[1] || g.cameras.len() != s[1] {
        return Err(Error::InvalidArgument("labels do not match the distance matrix".into()));
    }
    if protocol.max_rank == 0 {
        return Err(Error::InvalidArgument("max_rank must be >= 1".into()));
    }
    if dist.data().iter().any(|d| d.is_nan()) {
        return Err(Error::InvalidArgument("distance matrix contains NaN".into()));
    }
    Ok((s[0], s[1]))
}

fn finish(ap: Vec<Option<f64>>, first_hit: Vec<Option<usize>>, ties: usize, g: usize, protocol: Protocol) -> Result<EvalReport> {
    let valid: Vec<f64> = ap.iter().flatten().copied().collect();
    if valid.is_empty() {
        return Err(Error::InvalidArgument("no query has a relevant gallery entry".into()));
    }
    let mut cmc = vec![0.0; protocol.max_rank];
    for r in first_hit.iter().flatten() {
        for c in cmc.iter_mut().skip(*r) {
            *c += 1.0;
        }
    }
    let n = valid.len() as f64;
    cmc.iter_mut().for_each(|c| *c /= n);
    Ok(EvalReport {
        map: valid.iter().sum::<f64>() / n,
        cmc,
        excluded_queries: ap.len() - valid.len(),
        queries: ap.len(),
        average_precision: ap,
        ties,
        gallery: g,
        protocol,
    })
}

/// Ranks each query's gallery by ascending distance (ties by gallery index)
/// and scores the ranking.
pub fn evaluate_distances(dist: &Tensor<f64>, q: Labels, g: Labels, protocol: &Protocol) -> Result<EvalReport> {
    let (nq, ng) = check_labels(dist, q, g, protocol)?;
    let mut ap = Vec::with_capacity(nq);
    let mut first_hit = Vec::with_capacity(nq);
    let mut ties = 0;
    let mut order: Vec<usize> = Vec::with_capacity(ng);
    for i in 0..nq {
        let row = &dist.data()[i * ng..(i + 1) * ng];
        let (qid, qcam) = (q.identities[i], q.cameras[i]);
        order.clear();
        order.extend((0..ng).filter(|&j| !(protocol.junk_same_camera && g.identities[j] == qid && g.cameras[j] == qcam)));
        order.sort_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
        ties += order.windows(2).filter(|w| row[w[0]] == row[w[1]]).count();
        let mut hits = 0usize;
        let mut sum = 0.0;
        let mut first = None;
        for (r, &j) in order.iter().enumerate() {
            if g.identities[j] == qid {
                hits += 1;
                sum += hits as f64 / (r + 1) as f64;
                first.get_or_insert(r);
            }
        }
        if hits == 0 {
            ap.push(None);
            first_hit.push(None);
        } else {
            ap.push(Some(sum / hits as f64));
            first_hit.push(first);
        }
    }
    finish(ap, first_hit, ties, ng, *protocol)
}

/// Embeds nothing; ranks `queries` against `gallery` with squared Euclidean distance.
pub fn evaluate(queries: &EmbeddingMatrix, gallery: &EmbeddingMatrix, protocol: &Protocol) -> Result<EvalReport> {
    let d = distance_matrix(queries, gallery)?;
    evaluate_distances(&d, queries.into(), gallery.into(), protocol)
}

/// Quadratic reference: each entry's rank is found by counting the entries
/// that precede it, without sorting.
pub fn reference_evaluate(dist: &Tensor<f64>, q: Labels, g: Labels, protocol: &Protocol) -> Result<EvalReport> {
    let (nq, ng) = check_labels(dist, q, g, protocol)?;
    let mut ap = Vec::with_capacity(nq);
    let mut first_hit = Vec::with_capacity(nq);
    let mut ties = 0;
    for i in 0..nq {
        let d = |j: usize| dist.data()[i * ng + j];
        let keep = |j: usize| !(protocol.junk_same_camera && g.identities[j] == q.identities[i] && g.cameras[j] == q.cameras[i]);
        let relevant = |j: usize| keep(j) && g.identities[j] == q.identities[i];
        let before = |a: usize, b: usize| d(a) < d(b) || (d(a) == d(b) && a < b);
        // (rank, precision at that rank) for every relevant entry
        let mut terms = Vec::new();
        for j in (0..ng).filter(|&j| relevant(j)) {
            let rank = 1 + (0..ng).filter(|&k| keep(k) && before(k, j)).count();
            let hits = 1 + (0..ng).filter(|&k| relevant(k) && before(k, j)).count();
            terms.push((rank, hits as f64 / rank as f64));
        }
        for j in (0..ng).filter(|&j| keep(j)) {
            // j's successor in rank order ties with it
            let next = (0..ng).filter(|&k| keep(k) && before(j, k)).min_by(|&a, &b| if before(a, b) { Ordering::Less } else { Ordering::Greater });
            if next.is_some_and(|k| d(k) == d(j)) {
                ties += 1;
            }
        }
        terms.sort_by_key(|t| t.0);
        if terms.is_empty() {
            ap.push(None);
            first_hit.push(None);
        } else {
            let mut sum = 0.0;
            for t in &terms {
                sum += t.1;
            }
            ap.push(Some(sum / terms.len() as f64));
            first_hit.push(Some(terms[0].0 - 1));
        }
    }
    finish(ap, first_hit, ties, ng, *protocol)
}
