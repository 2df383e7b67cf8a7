//! Persistence of a [`ConditionedEmulator`]: a versioned little-endian
//! binary container plus a JSON sidecar with provenance.
//!
//! The field order is documented in `docs/artifact-format.md`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Complex, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::conditioner::{ConditionedEmulator, ObservationSet};
use crate::coupling::{DesignSet, InputTrajectory, MetricFlavor, MetricSpec};
use crate::covariance::{MeanTrajectory, ReplicaKernels, TimeGrid};
use crate::error::{EmuError, Result};
use crate::kernels::EigenDecomp;
use crate::linalg::CholeskyFactor;

pub const MAGIC: &[u8; 8] = b"DYNEMUCE";
pub const FORMAT_VERSION: u32 = 1;

/// Provenance stored next to the binary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactMeta {
    pub format_version: u32,
    pub model_id: String,
    pub tool_version: String,
    pub metric: MetricSpec,
    pub sigma_dim: usize,
    pub jitter: f64,
    #[serde(default)]
    pub seeds: BTreeMap<String, u64>,
    #[serde(default)]
    pub config_hash: Option<String>,
    /// FNV-1a of the binary, hex.
    pub checksum: String,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u64(&mut self, v: usize) {
        self.buf.extend_from_slice(&(v as u64).to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64s<'a>(&mut self, vs: impl IntoIterator<Item = &'a f64>) {
        for v in vs {
            self.f64(*v);
        }
    }

    fn complex(&mut self, vs: &[Complex<f64>]) {
        for z in vs {
            self.f64(z.re);
            self.f64(z.im);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len());
        let Some(end) = end else {
            return Err(EmuError::Format(format!("truncated at byte {}", self.pos)));
        };
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| EmuError::Format(format!("count {v} too large")))
    }

    /// A count that must fit into the remaining bytes at `unit` bytes each.
    fn count(&mut self, unit: usize) -> Result<usize> {
        let v = self.u64()?;
        if v.saturating_mul(unit) > self.buf.len() - self.pos {
            return Err(EmuError::Format(format!("implausible count {v}")));
        }
        Ok(v)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| EmuError::Format("overflow".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn matrix(&mut self, r: usize, c: usize) -> Result<DMatrix<f64>> {
        Ok(DMatrix::from_vec(r, c, self.f64s(r * c)?))
    }

    fn vector(&mut self, n: usize) -> Result<DVector<f64>> {
        Ok(DVector::from_vec(self.f64s(n)?))
    }

    fn complex(&mut self, n: usize) -> Result<Vec<Complex<f64>>> {
        let raw = self.f64s(2 * n)?;
        Ok(raw.chunks_exact(2).map(|p| Complex::new(p[0], p[1])).collect())
    }
}

/// Serializes the emulator into the binary container.
pub fn to_bytes(ce: &ConditionedEmulator) -> Result<Vec<u8>> {
    let m = ce.state_dim();
    let mo = ce.obs_dim();
    let n = ce.n_design();
    let n_int = ce.grid.n_intervals();
    let n_params = ce.design.inputs.first().map_or(0, |x| x.params.len());
    let n_forcing = ce
        .design
        .inputs
        .first()
        .and_then(|x| x.forcing.first())
        .map_or(0, |f| f.len());
    if ce.design.inputs.iter().any(|x| {
        x.params.len() != n_params || x.forcing.len() != n_int || x.forcing.iter().any(|f| f.len() != n_forcing)
    }) {
        return Err(EmuError::Format("design inputs have uneven shapes".into()));
    }
    let dim = ce.sigma_dim();

    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(MAGIC);
    w.buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    w.buf.extend_from_slice(&0u32.to_le_bytes());
    for d in [m, mo, n, n_int, n_params, n_forcing, ce.cond_times.len(), ce.metric.coords.len()] {
        w.u64(d);
    }
    w.f64s(ce.grid.times());
    w.f64s(ce.xi0.iter());
    w.f64s(ce.cct.iter());
    w.u64(match ce.metric.flavor {
        MetricFlavor::SquaredEuclidean => 0,
        MetricFlavor::Euclidean => 1,
    });
    for c in &ce.metric.coords {
        w.u64(*c);
    }
    w.f64s(&ce.metric.scales);
    w.f64(ce.cond_threshold);
    for x in &ce.design.inputs {
        w.f64s(&x.params);
        w.f64s(x.forcing.iter().flatten());
    }
    for t in &ce.cond_times {
        w.u64(*t);
    }
    w.f64(ce.jitter);
    for series in &ce.observed.series {
        w.f64s(series.iter().flat_map(|y| y.iter()));
    }
    for j in 0..dim {
        w.f64s(ce.chol.l.column(j).rows(j, dim - j).iter());
    }
    w.f64s(ce.residual.iter());
    for row in &ce.zprime {
        for z in row {
            w.f64s(z.iter());
        }
    }
    for (k, z) in ce.design_kernels.iter().zip(&ce.design_z) {
        for l in 0..n_int {
            let ed = &k.ed[l];
            w.complex(ed.m.as_slice());
            w.complex(ed.minv.as_slice());
            w.complex(ed.lambda.as_slice());
            w.f64(ed.cond_estimate);
            w.f64s(k.h[l].iter());
            w.f64s(k.k[l].iter());
            w.f64s(k.a[l].iter());
            w.f64s(k.b[l].iter());
            w.f64(k.dt[l]);
        }
        for h in &k.obs {
            w.f64s(h.iter());
        }
        for v in &z.z_tilde {
            w.f64s(v.iter());
        }
        for v in &z.z {
            w.f64s(v.iter());
        }
    }
    let sum = fnv1a(&w.buf);
    w.buf.extend_from_slice(&sum.to_le_bytes());
    Ok(w.buf)
}

pub fn from_bytes(bytes: &[u8]) -> Result<ConditionedEmulator> {
    if bytes.len() < 24 || &bytes[..8] != MAGIC {
        return Err(EmuError::Format("not an emulator artifact".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    if fnv1a(body) != u64::from_le_bytes(tail.try_into().unwrap()) {
        return Err(EmuError::Format("checksum mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 8 };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(EmuError::Format(format!("unsupported format version {version}")));
    }
    r.u32()?;
    let m = r.count(8)?;
    let mo = r.count(8)?;
    let n = r.count(8)?;
    let n_int = r.count(8)?;
    let n_params = r.count(8)?;
    let n_forcing = r.count(8)?;
    let n_cond = r.count(8)?;
    let n_coords = r.count(16)?;

    let grid = TimeGrid::new(r.f64s(n_int + 1)?)?;
    let xi0 = r.vector(m)?;
    let cct = r.matrix(m, m)?;
    let flavor = match r.u64()? {
        0 => MetricFlavor::SquaredEuclidean,
        1 => MetricFlavor::Euclidean,
        f => return Err(EmuError::Format(format!("unknown metric flavor {f}"))),
    };
    let coords = (0..n_coords).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
    let metric = MetricSpec::new(coords, r.f64s(n_coords)?, flavor)?;
    let cond_threshold = r.f64()?;
    let mut inputs = Vec::with_capacity(n);
    for _ in 0..n {
        let params = r.f64s(n_params)?;
        let flat = r.f64s(n_int * n_forcing)?;
        let forcing = if n_forcing == 0 {
            vec![Vec::new(); n_int]
        } else {
            flat.chunks_exact(n_forcing).map(<[f64]>::to_vec).collect()
        };
        inputs.push(InputTrajectory::new(params, forcing, &grid)?);
    }
    let design = DesignSet::new(inputs)?;
    let cond_times = (0..n_cond).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
    if cond_times.iter().any(|t| *t == 0 || *t > n_int) {
        return Err(EmuError::Format("conditioning time out of range".into()));
    }
    let jitter = r.f64()?;
    let mut series = Vec::with_capacity(n);
    for _ in 0..n {
        series.push((0..=n_int).map(|_| r.vector(mo)).collect::<Result<Vec<_>>>()?);
    }
    let observed = ObservationSet::new(series)?;

    let dim = n_cond * n * mo;
    let mut l = DMatrix::zeros(dim, dim);
    for j in 0..dim {
        let col = r.f64s(dim - j)?;
        l.column_mut(j).rows_mut(j, dim - j).copy_from_slice(&col);
    }
    let residual = r.vector(dim)?;
    let mut zprime = Vec::with_capacity(n_int);
    for _ in 0..n_int {
        zprime.push((0..n).map(|_| r.vector(m)).collect::<Result<Vec<_>>>()?);
    }
    let mut design_kernels = Vec::with_capacity(n);
    let mut design_z = Vec::with_capacity(n);
    for _ in 0..n {
        let mut k = ReplicaKernels {
            a: Vec::with_capacity(n_int),
            b: Vec::with_capacity(n_int),
            ed: Vec::with_capacity(n_int),
            h: Vec::with_capacity(n_int),
            k: Vec::with_capacity(n_int),
            obs: Vec::with_capacity(n_int + 1),
            dt: Vec::with_capacity(n_int),
        };
        for _ in 0..n_int {
            let em = DMatrix::from_vec(m, m, r.complex(m * m)?);
            let minv = DMatrix::from_vec(m, m, r.complex(m * m)?);
            let lambda = DVector::from_vec(r.complex(m)?);
            let cond_estimate = r.f64()?;
            k.ed.push(EigenDecomp {
                m: em,
                minv,
                lambda,
                cond_estimate,
            });
            k.h.push(r.matrix(m, m)?);
            k.k.push(r.vector(m)?);
            k.a.push(r.matrix(m, m)?);
            k.b.push(r.vector(m)?);
            k.dt.push(r.f64()?);
        }
        for _ in 0..=n_int {
            k.obs.push(r.matrix(mo, m)?);
        }
        let z_tilde = (0..=n_int).map(|_| r.vector(m)).collect::<Result<Vec<_>>>()?;
        let z = (0..=n_int).map(|_| r.vector(mo)).collect::<Result<Vec<_>>>()?;
        design_kernels.push(k);
        design_z.push(MeanTrajectory { z_tilde, z });
    }
    if r.pos != body.len() {
        return Err(EmuError::Format(format!("{} trailing bytes", body.len() - r.pos)));
    }
    Ok(ConditionedEmulator {
        grid,
        design,
        metric,
        cct,
        xi0,
        cond_threshold,
        cond_times,
        chol: CholeskyFactor { l },
        jitter,
        residual,
        zprime,
        design_kernels,
        design_z,
        observed,
    })
}

/// Writes the binary to `path` and the sidecar to `path` + `.json`.
/// The sidecar's checksum is filled in from the binary.
pub fn save(path: &Path, ce: &ConditionedEmulator, meta: &ArtifactMeta) -> Result<ArtifactMeta> {
    let bytes = to_bytes(ce)?;
    let mut meta = meta.clone();
    meta.format_version = FORMAT_VERSION;
    meta.sigma_dim = ce.sigma_dim();
    meta.jitter = ce.jitter;
    meta.metric = ce.metric.clone();
    meta.checksum = format!("{:016x}", fnv1a(&bytes));
    fs::write(path, &bytes)?;
    fs::write(sidecar_path(path), serde_json::to_string_pretty(&meta)? + "\n")?;
    Ok(meta)
}

/// Reads the binary and, when present, its sidecar; a sidecar whose checksum
/// disagrees with the binary is rejected.
pub fn load(path: &Path) -> Result<(ConditionedEmulator, Option<ArtifactMeta>)> {
    let bytes = fs::read(path)?;
    let ce = from_bytes(&bytes)?;
    let side = sidecar_path(path);
    let meta = if side.exists() {
        let meta: ArtifactMeta = serde_json::from_str(&fs::read_to_string(side)?)?;
        if meta.checksum != format!("{:016x}", fnv1a(&bytes)) {
            return Err(EmuError::Format("sidecar does not belong to this artifact".into()));
        }
        Some(meta)
    } else {
        None
    };
    Ok((ce, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioner::{condition, ConditionConfig};
    use crate::model::AffineModel;

    fn tiny() -> ConditionedEmulator {
        let model = AffineModel::new(
            DMatrix::from_element(2, 2, -0.3) - DMatrix::identity(2, 2),
            vec![DMatrix::from_diagonal_element(2, 2, -0.5)],
            DVector::from_vec(vec![0.1, 0.2]),
            DMatrix::from_vec(2, 1, vec![1.0, 0.0]),
            DMatrix::from_row_slice(1, 2, &[0.0, 1.0]),
        )
        .unwrap();
        let grid = TimeGrid::uniform(0.0, 0.5, 3).unwrap();
        let forcing = vec![vec![1.0], vec![0.0], vec![2.0]];
        let design = DesignSet::new(vec![
            InputTrajectory::new(vec![0.2], forcing.clone(), &grid).unwrap(),
            InputTrajectory::new(vec![0.9], forcing, &grid).unwrap(),
        ])
        .unwrap();
        let runs = ObservationSet::new(
            (0..2)
                .map(|a| (0..4).map(|i| DVector::from_element(1, (a + i) as f64 * 0.3)).collect())
                .collect(),
        )
        .unwrap();
        let metric = MetricSpec::new(vec![0], vec![1.0], MetricFlavor::Euclidean).unwrap();
        let config = ConditionConfig::new(DVector::from_vec(vec![1.0, 0.5]), DMatrix::identity(2, 2) * 0.2, metric);
        condition(&model, &design, &runs, &grid, &config).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let ce = tiny();
        let bytes = to_bytes(&ce).unwrap();
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back, ce);
        assert_eq!(to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = to_bytes(&tiny()).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(matches!(from_bytes(&bytes), Err(EmuError::Format(_))));
        assert!(from_bytes(&bytes[..20]).is_err());
        assert!(from_bytes(b"not an artifact at all..").is_err());
    }

    #[test]
    fn sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emu.bin");
        let ce = tiny();
        let meta = ArtifactMeta {
            format_version: 0,
            model_id: "affine".into(),
            tool_version: "test".into(),
            metric: ce.metric.clone(),
            sigma_dim: 0,
            jitter: 0.0,
            seeds: BTreeMap::from([("design".to_string(), 3)]),
            config_hash: None,
            checksum: String::new(),
        };
        let written = save(&path, &ce, &meta).unwrap();
        let (back, side) = load(&path).unwrap();
        assert_eq!(back, ce);
        assert_eq!(side.unwrap(), written);
        assert_eq!(written.sigma_dim, 6);

        fs::write(sidecar_path(&path), serde_json::to_string(&ArtifactMeta { checksum: "0".into(), ..written }).unwrap())
            .unwrap();
        assert!(load(&path).is_err());
    }
}
