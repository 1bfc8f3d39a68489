//! Embedding sets: unit-norm feature vectors grouped by domain, a synthetic
//! multi-domain generator standing in for sensor/race covariate shift, and
//! bit-exact file I/O.

use crate::container::{read_container, write_container};
use crate::error::{LafrError, Result};
use crate::linalg::{dot, l2_norm, Mat};
use crate::rng::{derive_seed, CounterRng};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Norm slack tolerated on construction and after save/load.
const NORM_TOL: f64 = 1e-6;
/// Rows whose norm is off by more than this are rejected on load.
const NORM_REPAIR_TOL: f64 = 1e-3;

/// A set of unit-norm feature vectors from one domain, optionally labeled.
///
/// Vectors are stored as f32 so the on-disk payload round-trips bit for bit;
/// all numerics lift to f64 via [`EmbeddingSet::to_mat`].
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    n: usize,
    d: usize,
    vectors: Vec<f32>,
    labels: Option<Vec<u32>>,
    domain_tag: String,
    source_ids: Vec<String>,
}

impl EmbeddingSet {
    pub fn new(
        n: usize,
        d: usize,
        vectors: Vec<f32>,
        labels: Option<Vec<u32>>,
        domain_tag: String,
        source_ids: Vec<String>,
    ) -> Result<Self> {
        if n == 0 || d < 2 {
            return Err(LafrError::InvalidArgument(format!(
                "need n >= 1 and d >= 2, got n={n}, d={d}"
            )));
        }
        if vectors.len() != n * d {
            return Err(LafrError::Shape(format!(
                "vector payload {} != n*d = {}",
                vectors.len(),
                n * d
            )));
        }
        if source_ids.len() != n {
            return Err(LafrError::Shape(format!(
                "source_ids {} != n = {n}",
                source_ids.len()
            )));
        }
        if let Some(ref ls) = labels {
            if ls.len() != n {
                return Err(LafrError::Shape(format!("labels {} != n = {n}", ls.len())));
            }
            check_contiguous_labels(ls)?;
        }
        let set = EmbeddingSet {
            n,
            d,
            vectors,
            labels,
            domain_tag,
            source_ids,
        };
        for i in 0..n {
            let norm = l2_norm(&set.row_f64(i));
            if (norm - 1.0).abs() > NORM_TOL {
                return Err(LafrError::InvalidArgument(format!(
                    "row {i} has L2 norm {norm}, expected 1.0 within {NORM_TOL}"
                )));
            }
        }
        Ok(set)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.d..(i + 1) * self.d]
    }

    fn row_f64(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|&v| v as f64).collect()
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.labels
            .as_ref()
            .map(|ls| ls.iter().copied().max().map_or(0, |m| m as usize + 1))
    }

    pub fn domain_tag(&self) -> &str {
        &self.domain_tag
    }

    pub fn source_ids(&self) -> &[String] {
        &self.source_ids
    }

    /// Lift to an n x d f64 matrix.
    pub fn to_mat(&self) -> Mat {
        Mat::from_vec(self.n, self.d, self.vectors.iter().map(|&v| v as f64).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = EmbeddingHeader {
            kind: "embeddings".into(),
            n: self.n,
            d: self.d,
            domain_tag: self.domain_tag.clone(),
            has_labels: self.labels.is_some(),
            source_ids: self.source_ids.clone(),
        };
        let mut payload = Vec::with_capacity(self.n * self.d * 4);
        for v in &self.vectors {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(ref ls) = self.labels {
            for l in ls {
                payload.extend_from_slice(&l.to_le_bytes());
            }
        }
        write_container(path, &header, &payload)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, payload): (EmbeddingHeader, Vec<u8>) = read_container(path)?;
        if header.kind != "embeddings" {
            return Err(LafrError::Format(format!(
                "{}: expected embeddings container, found {}",
                path.display(),
                header.kind
            )));
        }
        let vec_bytes = header.n * header.d * 4;
        let label_bytes = if header.has_labels { header.n * 4 } else { 0 };
        if payload.len() != vec_bytes + label_bytes {
            return Err(LafrError::Format(format!(
                "{}: payload is {} bytes, header promises {}",
                path.display(),
                payload.len(),
                vec_bytes + label_bytes
            )));
        }
        if header.source_ids.len() != header.n {
            return Err(LafrError::Format(format!(
                "{}: header carries {} source ids for n={}",
                path.display(),
                header.source_ids.len(),
                header.n
            )));
        }
        let mut vectors: Vec<f32> = payload[..vec_bytes]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let labels = if header.has_labels {
            let ls: Vec<u32> = payload[vec_bytes..]
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            check_contiguous_labels(&ls)?;
            Some(ls)
        } else {
            None
        };
        // Re-check norms: keep exact bits when already valid, repair small
        // drift, reject anything worse.
        for i in 0..header.n {
            let row = &mut vectors[i * header.d..(i + 1) * header.d];
            let norm = l2_norm(&row.iter().map(|&v| v as f64).collect::<Vec<_>>());
            if norm == 0.0 {
                return Err(LafrError::CorruptData(format!(
                    "{}: row {i} has zero norm",
                    path.display()
                )));
            }
            let err = (norm - 1.0).abs();
            if err > NORM_REPAIR_TOL {
                return Err(LafrError::CorruptData(format!(
                    "{}: row {i} has L2 norm {norm}, beyond repair tolerance",
                    path.display()
                )));
            }
            if err > NORM_TOL {
                for v in row.iter_mut() {
                    *v = ((*v as f64) / norm) as f32;
                }
            }
        }
        EmbeddingSet::new(
            header.n,
            header.d,
            vectors,
            labels,
            header.domain_tag,
            header.source_ids,
        )
    }
}

fn check_contiguous_labels(labels: &[u32]) -> Result<()> {
    let max = labels.iter().copied().max().unwrap_or(0);
    let mut seen = vec![false; max as usize + 1];
    for &l in labels {
        seen[l as usize] = true;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(LafrError::InvalidLabeling(format!(
            "labels not contiguous: class {missing} is empty but max label is {max}"
        )));
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct EmbeddingHeader {
    kind: String,
    n: usize,
    d: usize,
    domain_tag: String,
    has_labels: bool,
    source_ids: Vec<String>,
}

/// Recipe for one synthetic domain: a seeded orthogonal rotation plus
/// anisotropic axis scaling model the domain shift, Gaussian angular noise
/// models within-class variation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDomainSpec {
    pub domain_tag: String,
    pub num_classes: usize,
    /// Inclusive (min, max) item count per class.
    pub items_per_class: (usize, usize),
    /// Seed for the orthogonal domain transform; None means identity.
    pub rotation_seed: Option<u64>,
    pub noise_sigma: f64,
    /// Log-scale spread of the per-axis scaling; 0 means no scaling.
    pub contrast_shift: f64,
    /// Seed for per-item noise and per-class counts, independent of the
    /// domain transform so one domain can emit disjoint sample sets.
    pub sample_seed: u64,
}

impl SyntheticDomainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.noise_sigma < 0.0 {
            return Err(LafrError::InvalidSpec(format!(
                "noise_sigma must be >= 0, got {}",
                self.noise_sigma
            )));
        }
        if self.num_classes == 0 {
            return Err(LafrError::InvalidSpec("num_classes must be >= 1".into()));
        }
        let (lo, hi) = self.items_per_class;
        if lo == 0 || lo > hi {
            return Err(LafrError::InvalidSpec(format!(
                "items_per_class range ({lo}, {hi}) is empty or zero"
            )));
        }
        if self.contrast_shift < 0.0 {
            return Err(LafrError::InvalidSpec(format!(
                "contrast_shift must be >= 0, got {}",
                self.contrast_shift
            )));
        }
        Ok(())
    }
}

/// Random unit-norm class prototypes shared across domains.
pub fn random_prototypes(num: usize, d: usize, seed: u64) -> Mat {
    let mut rng = CounterRng::new(derive_seed(seed, 0x70726f74)); // "prot"
    let mut m = Mat::zeros(num, d);
    for i in 0..num {
        let row = m.row_mut(i);
        loop {
            for v in row.iter_mut() {
                *v = rng.next_gaussian();
            }
            let norm = l2_norm(row);
            if norm > 1e-9 {
                for v in row.iter_mut() {
                    *v /= norm;
                }
                break;
            }
        }
    }
    m
}

/// Prototypes re-drawn until every pairwise cosine stays below `max_cos`.
/// Deterministic: the rejection loop consumes the same stream every time.
pub fn separated_prototypes(num: usize, d: usize, max_cos: f64, seed: u64) -> Mat {
    let mut rng = CounterRng::new(derive_seed(seed, 0x73657061)); // "sepa"
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(num);
    let mut attempts = 0usize;
    while rows.len() < num {
        attempts += 1;
        assert!(
            attempts < 200_000,
            "cannot place {num} prototypes in {d} dims below cosine {max_cos}"
        );
        let mut cand = vec![0.0; d];
        for v in cand.iter_mut() {
            *v = rng.next_gaussian();
        }
        let norm = l2_norm(&cand);
        if norm < 1e-9 {
            continue;
        }
        for v in cand.iter_mut() {
            *v /= norm;
        }
        if rows.iter().all(|r| dot(r, &cand).abs() < max_cos) {
            rows.push(cand);
        }
    }
    Mat::from_rows(&rows)
}

/// Seeded random orthogonal matrix via modified Gram-Schmidt on a Gaussian
/// draw, with the diagonal sign fixed so the factorization is unique.
fn random_orthogonal(d: usize, seed: u64) -> Mat {
    let mut rng = CounterRng::new(derive_seed(seed, 0x6f727468)); // "orth"
    loop {
        let mut q: Vec<Vec<f64>> = Vec::with_capacity(d);
        let mut ok = true;
        for _ in 0..d {
            let mut col: Vec<f64> = (0..d).map(|_| rng.next_gaussian()).collect();
            for prev in &q {
                let proj = dot(prev, &col);
                for (c, p) in col.iter_mut().zip(prev) {
                    *c -= proj * p;
                }
            }
            let norm = l2_norm(&col);
            if norm < 1e-9 {
                ok = false;
                break;
            }
            let sign = if col[q.len()] < 0.0 { -1.0 } else { 1.0 };
            for c in col.iter_mut() {
                *c = sign * *c / norm;
            }
            q.push(col);
        }
        if ok {
            return Mat::from_rows(&q);
        }
    }
}

/// Generate one labeled domain: class k's rows scatter around the
/// domain-transformed prototype k, renormalized to the unit sphere.
pub fn generate_domain(spec: &SyntheticDomainSpec, prototypes: &Mat) -> Result<EmbeddingSet> {
    spec.validate()?;
    let d = prototypes.cols();
    if d < 2 {
        return Err(LafrError::InvalidArgument(format!(
            "prototype dimension must be >= 2, got {d}"
        )));
    }
    if spec.num_classes > prototypes.rows() {
        return Err(LafrError::InvalidSpec(format!(
            "spec wants {} classes but prototype matrix has {} rows",
            spec.num_classes,
            prototypes.rows()
        )));
    }
    for i in 0..prototypes.rows() {
        let norm = l2_norm(prototypes.row(i));
        if (norm - 1.0).abs() > NORM_TOL {
            return Err(LafrError::InvalidArgument(format!(
                "prototype row {i} has norm {norm}, expected unit"
            )));
        }
    }

    let rotation = spec.rotation_seed.map(|s| random_orthogonal(d, s));
    let scaling: Vec<f64> = if spec.contrast_shift > 0.0 {
        // Scaling draws ride on the rotation seed: they are part of the
        // domain transform, not of the sample stream.
        let mut rng = CounterRng::new(derive_seed(spec.rotation_seed.unwrap_or(0), 0x7363616c)); // "scal"
        (0..d).map(|_| (spec.contrast_shift * rng.next_signed()).exp()).collect()
    } else {
        vec![1.0; d]
    };

    let mut count_rng = CounterRng::new(derive_seed(spec.sample_seed, 0x636e7473)); // "cnts"
    let (lo, hi) = spec.items_per_class;
    let counts: Vec<usize> = (0..spec.num_classes)
        .map(|_| count_rng.next_in_range(lo, hi))
        .collect();

    let n: usize = counts.iter().sum();
    let mut vectors = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    let mut source_ids = Vec::with_capacity(n);

    for (class, &count) in counts.iter().enumerate() {
        let mut transformed = vec![0.0f64; d];
        match &rotation {
            Some(q) => {
                for (r, out) in transformed.iter_mut().enumerate() {
                    *out = dot(q.row(r), prototypes.row(class));
                }
            }
            None => transformed.copy_from_slice(prototypes.row(class)),
        }
        for (t, s) in transformed.iter_mut().zip(&scaling) {
            *t *= s;
        }

        let mut noise_rng = CounterRng::new(derive_seed(
            derive_seed(spec.sample_seed, 0x6e6f6973), // "nois"
            class as u64,
        ));
        for item in 0..count {
            let mut v = transformed.clone();
            if spec.noise_sigma > 0.0 {
                for x in v.iter_mut() {
                    *x += spec.noise_sigma * noise_rng.next_gaussian();
                }
            }
            let norm = l2_norm(&v);
            if norm < 1e-12 {
                return Err(LafrError::Numeric(format!(
                    "generated row for class {class} collapsed to zero norm"
                )));
            }
            for x in v.iter_mut() {
                *x /= norm;
            }
            vectors.extend(v.iter().map(|&x| x as f32));
            labels.push(class as u32);
            source_ids.push(format!("{}/{class:04}/{item:04}", spec.domain_tag));
        }
    }

    EmbeddingSet::new(n, d, vectors, Some(labels), spec.domain_tag.clone(), source_ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::cosine;

    fn basis_prototypes(num: usize, d: usize) -> Mat {
        let mut m = Mat::zeros(num, d);
        for i in 0..num {
            m.set(i, i % d, 1.0);
        }
        m
    }

    fn spec(tag: &str) -> SyntheticDomainSpec {
        SyntheticDomainSpec {
            domain_tag: tag.into(),
            num_classes: 3,
            items_per_class: (4, 4),
            rotation_seed: None,
            noise_sigma: 0.0,
            contrast_shift: 0.0,
            sample_seed: 1,
        }
    }

    #[test]
    fn zero_noise_identity_transform_reproduces_prototypes() {
        let protos = basis_prototypes(3, 5);
        let set = generate_domain(&spec("t"), &protos).unwrap();
        for i in 0..set.n() {
            let class = set.labels().unwrap()[i] as usize;
            let want: Vec<f32> = protos.row(class).iter().map(|&v| v as f32).collect();
            assert_eq!(set.row(i), &want[..]);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let protos = random_prototypes(4, 8, 3);
        let mut s = spec("t");
        s.num_classes = 4;
        s.noise_sigma = 0.05;
        s.rotation_seed = Some(9);
        s.contrast_shift = 0.2;
        let a = generate_domain(&s, &protos).unwrap();
        let b = generate_domain(&s, &protos).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn intra_class_cosine_beats_inter_class() {
        let protos = random_prototypes(10, 16, 5);
        let mut s = spec("t");
        s.num_classes = 10;
        s.items_per_class = (20, 20);
        s.noise_sigma = 0.05;
        s.rotation_seed = Some(2);
        let set = generate_domain(&s, &protos).unwrap();
        let labels = set.labels().unwrap().to_vec();
        let m = set.to_mat();
        let (mut intra, mut inter) = ((0.0, 0u64), (0.0, 0u64));
        for i in 0..set.n() {
            for j in (i + 1)..set.n() {
                let c = cosine(m.row(i), m.row(j));
                if labels[i] == labels[j] {
                    intra = (intra.0 + c, intra.1 + 1);
                } else {
                    inter = (inter.0 + c, inter.1 + 1);
                }
            }
        }
        let mean_intra = intra.0 / intra.1 as f64;
        let mean_inter = inter.0 / inter.1 as f64;
        assert!(mean_intra > mean_inter, "intra {mean_intra} vs inter {mean_inter}");
    }

    #[test]
    fn zero_noise_intra_class_cosines_exactly_one() {
        // Without noise, every row of a class is the same renormalized
        // transformed prototype, so intra-class cosines clamp to exactly 1.
        let protos = random_prototypes(4, 6, 11);
        let mut s = spec("t");
        s.num_classes = 4;
        s.rotation_seed = Some(5);
        s.contrast_shift = 0.4;
        let set = generate_domain(&s, &protos).unwrap();
        let labels = set.labels().unwrap();
        let m = set.to_mat();
        for i in 0..set.n() {
            for j in (i + 1)..set.n() {
                if labels[i] == labels[j] {
                    assert_eq!(cosine(m.row(i), m.row(j)), 1.0);
                }
            }
        }
    }

    #[test]
    fn negative_noise_rejected() {
        let protos = basis_prototypes(3, 4);
        let mut s = spec("t");
        s.noise_sigma = -0.1;
        assert!(matches!(
            generate_domain(&s, &protos),
            Err(LafrError::InvalidSpec(_))
        ));
    }

    #[test]
    fn distinct_rotation_seeds_distinct_transforms() {
        let a = random_orthogonal(6, 1);
        let b = random_orthogonal(6, 2);
        assert_ne!(a, b);
        // Orthogonality: Q^T Q = I.
        let id = a.transpose().matmul(&a);
        for i in 0..6 {
            for j in 0..6 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((id.get(i, j) - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn roundtrip_save_load_identity() {
        let protos = random_prototypes(3, 4, 7);
        let mut s = spec("rt");
        s.noise_sigma = 0.1;
        let set = generate_domain(&s, &protos).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("set.emb");
        set.save(&path).unwrap();
        let loaded = EmbeddingSet::load(&path).unwrap();
        assert_eq!(set, loaded);
    }

    #[test]
    fn zero_row_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.emb");
        let set = EmbeddingSet::new(
            2,
            2,
            vec![1.0, 0.0, 0.0, 1.0],
            None,
            "t".into(),
            vec!["a".into(), "b".into()],
        )
        .unwrap();
        set.save(&path).unwrap();
        // Stamp zeros over the first row's payload.
        let mut bytes = std::fs::read(&path).unwrap();
        let header_len = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
        for b in bytes.iter_mut().skip(20 + header_len).take(8) {
            *b = 0;
        }
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            EmbeddingSet::load(&path),
            Err(LafrError::CorruptData(_))
        ));
    }

    #[test]
    fn header_body_length_mismatch_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.emb");
        let set = EmbeddingSet::new(
            2,
            2,
            vec![1.0, 0.0, 0.0, 1.0],
            None,
            "t".into(),
            vec!["a".into(), "b".into()],
        )
        .unwrap();
        set.save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.extend_from_slice(&[0u8; 8]); // a third phantom row
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(EmbeddingSet::load(&path), Err(LafrError::Format(_))));
    }

    #[test]
    fn load_repairs_small_norm_drift_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("drift.emb");
        let set = EmbeddingSet::new(
            1,
            2,
            vec![0.6, 0.8],
            None,
            "t".into(),
            vec!["a".into()],
        )
        .unwrap();
        set.save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let header_len = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
        let off = 20 + header_len;
        // Scale the row by 1.0005: within repair tolerance, outside strict.
        for i in 0..2 {
            let s = off + i * 4;
            let v = f32::from_le_bytes(bytes[s..s + 4].try_into().unwrap());
            bytes[s..s + 4].copy_from_slice(&(v * 1.0005).to_le_bytes());
        }
        std::fs::write(&path, &bytes).unwrap();
        let loaded = EmbeddingSet::load(&path).unwrap();
        let norm = l2_norm(&loaded.row(0).iter().map(|&v| v as f64).collect::<Vec<_>>());
        assert!((norm - 1.0).abs() < 1e-6);
    }
}
