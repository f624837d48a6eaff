//! Strand geometry I/O and resampling.
//!
//! Two on-disk formats are supported:
//!
//! * the community binary `.hair` format (magic `HAIR`, 128-byte header,
//!   little-endian `u32` counts and IEEE-754 `f32` arrays);
//! * the internal `CGH0` blob used between pipeline stages:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "CGH0"
//! 4       4     u32 strand count
//! 8       4     u32 points per strand
//! 12      ...   f32 x, y, z for every point, strand after strand
//! ```

use thiserror::Error;

use crate::geom::{cumulative_length, Vec3};

pub const HAIR_MAGIC: &[u8; 4] = b"HAIR";
pub const BLOB_MAGIC: &[u8; 4] = b"CGH0";
pub const HAIR_HEADER_LEN: usize = 128;

/// Canonical point count per strand.
pub const DEFAULT_POINTS_PER_STRAND: usize = 100;

const BIT_SEGMENTS: u32 = 1 << 0;
const BIT_POINTS: u32 = 1 << 1;
const BIT_THICKNESS: u32 = 1 << 2;
const BIT_TRANSPARENCY: u32 = 1 << 3;
const BIT_COLOR: u32 = 1 << 4;

#[derive(Debug, Error, PartialEq)]
pub enum HairIoError {
    #[error("not a hair file (magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("file truncated: need {needed} bytes, have {got}")]
    TruncatedFile { needed: usize, got: usize },
    #[error("inconsistent counts: header declares {declared} points, segments imply {implied}")]
    InconsistentCounts { declared: usize, implied: usize },
    #[error("file has no point array")]
    MissingPoints,
    #[error("strand {index}: {reason}")]
    InvalidStrand { index: usize, reason: &'static str },
    #[error("hairstyle has no strands")]
    EmptyHairstyle,
    #[error("strand {0} has more than 65536 points")]
    StrandTooLong(usize),
    #[error("strands have different point counts")]
    RaggedHairstyle,
    #[error("strand has zero length")]
    DegenerateStrand,
    #[error("need at least 2 output points, got {0}")]
    TooFewPoints(usize),
}

pub type Result<T> = std::result::Result<T, HairIoError>;

/// One hair fiber: an ordered 3D polyline with at least two finite points.
#[derive(Debug, Clone, PartialEq)]
pub struct Strand {
    points: Vec<Vec3>,
}

impl Strand {
    pub fn new(points: Vec<Vec3>) -> Result<Self> {
        if points.len() < 2 {
            return Err(HairIoError::InvalidStrand { index: 0, reason: "fewer than 2 points" });
        }
        if points.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(HairIoError::InvalidStrand { index: 0, reason: "non-finite coordinate" });
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn root(&self) -> Vec3 {
        self.points[0]
    }

    pub fn length(&self) -> f64 {
        self.points.windows(2).map(|w| (w[1] - w[0]).norm()).sum()
    }

    pub fn translated(&self, by: &Vec3) -> Self {
        Self { points: self.points.iter().map(|p| p + by).collect() }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Hairstyle {
    pub strands: Vec<Strand>,
}

impl Hairstyle {
    pub fn new(strands: Vec<Strand>) -> Self {
        Self { strands }
    }

    pub fn len(&self) -> usize {
        self.strands.len()
    }

    pub fn is_empty(&self) -> bool {
        self.strands.is_empty()
    }

    /// Common point count, if every strand has the same one.
    pub fn points_per_strand(&self) -> Option<usize> {
        let first = self.strands.first()?.len();
        self.strands.iter().all(|s| s.len() == first).then_some(first)
    }

    pub fn total_points(&self) -> usize {
        self.strands.iter().map(Strand::len).sum()
    }

    /// Resample every strand to `n` points.
    pub fn normalized(&self, n: usize) -> Result<Self> {
        let strands = self
            .strands
            .iter()
            .map(|s| resample_strand(s, n))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { strands })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(HairIoError::TruncatedFile { needed: end, got: self.bytes.len() });
        }
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Parse a `.hair` file.
///
/// Thickness, transparency and color arrays are validated for length and
/// skipped.
pub fn parse_hair_file(bytes: &[u8]) -> Result<Hairstyle> {
    if bytes.len() < 4 {
        return Err(HairIoError::TruncatedFile { needed: HAIR_HEADER_LEN, got: bytes.len() });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if &magic != HAIR_MAGIC {
        return Err(HairIoError::BadMagic(magic));
    }
    if bytes.len() < HAIR_HEADER_LEN {
        return Err(HairIoError::TruncatedFile { needed: HAIR_HEADER_LEN, got: bytes.len() });
    }
    let mut r = Reader { bytes, pos: 4 };
    let n_strands = r.u32()? as usize;
    let n_points = r.u32()? as usize;
    let flags = r.u32()?;
    let default_segments = r.u32()? as usize;
    // default thickness, transparency, color[3], info[88]
    r.pos = HAIR_HEADER_LEN;

    let segments: Vec<usize> = if flags & BIT_SEGMENTS != 0 {
        (0..n_strands).map(|_| r.u16().map(usize::from)).collect::<Result<_>>()?
    } else {
        vec![default_segments; n_strands]
    };
    let implied: usize = segments.iter().map(|s| s + 1).sum();
    if implied != n_points {
        return Err(HairIoError::InconsistentCounts { declared: n_points, implied });
    }
    if flags & BIT_POINTS == 0 {
        return Err(HairIoError::MissingPoints);
    }
    let mut coords = Vec::with_capacity(n_points);
    for _ in 0..n_points {
        let x = r.f32()?;
        let y = r.f32()?;
        let z = r.f32()?;
        coords.push(Vec3::new(x as f64, y as f64, z as f64));
    }
    let mut skip = 0;
    if flags & BIT_THICKNESS != 0 {
        skip += 4 * n_points;
    }
    if flags & BIT_TRANSPARENCY != 0 {
        skip += 4 * n_points;
    }
    if flags & BIT_COLOR != 0 {
        skip += 12 * n_points;
    }
    r.take(skip)?;

    let mut strands = Vec::with_capacity(n_strands);
    let mut start = 0;
    for (index, seg) in segments.iter().enumerate() {
        let end = start + seg + 1;
        let strand = Strand::new(coords[start..end].to_vec()).map_err(|e| match e {
            HairIoError::InvalidStrand { reason, .. } => HairIoError::InvalidStrand { index, reason },
            other => other,
        })?;
        strands.push(strand);
        start = end;
    }
    Ok(Hairstyle { strands })
}

/// Serialize to the `.hair` format with a segments array and a points array.
pub fn write_hair_file(h: &Hairstyle) -> Result<Vec<u8>> {
    if h.is_empty() {
        return Err(HairIoError::EmptyHairstyle);
    }
    for (i, s) in h.strands.iter().enumerate() {
        if s.len() - 1 > u16::MAX as usize {
            return Err(HairIoError::StrandTooLong(i));
        }
    }
    let n_points = h.total_points();
    let mut out = Vec::with_capacity(HAIR_HEADER_LEN + 2 * h.len() + 12 * n_points);
    out.extend_from_slice(HAIR_MAGIC);
    out.extend_from_slice(&(h.len() as u32).to_le_bytes());
    out.extend_from_slice(&(n_points as u32).to_le_bytes());
    out.extend_from_slice(&(BIT_SEGMENTS | BIT_POINTS).to_le_bytes());
    let default_segments = h.strands[0].len() as u32 - 1;
    out.extend_from_slice(&default_segments.to_le_bytes());
    out.extend_from_slice(&1.0f32.to_le_bytes()); // thickness
    out.extend_from_slice(&0.0f32.to_le_bytes()); // transparency
    for _ in 0..3 {
        out.extend_from_slice(&0.5f32.to_le_bytes()); // color
    }
    out.resize(HAIR_HEADER_LEN, 0);
    for s in &h.strands {
        out.extend_from_slice(&((s.len() - 1) as u16).to_le_bytes());
    }
    for s in &h.strands {
        for p in s.points() {
            for c in p.iter() {
                out.extend_from_slice(&(*c as f32).to_le_bytes());
            }
        }
    }
    Ok(out)
}

/// Serialize to a `CGH0` blob. All strands must share one point count.
pub fn write_blob(h: &Hairstyle) -> Result<Vec<u8>> {
    if h.is_empty() {
        return Err(HairIoError::EmptyHairstyle);
    }
    let per = h.points_per_strand().ok_or(HairIoError::RaggedHairstyle)?;
    let mut out = Vec::with_capacity(12 + 12 * per * h.len());
    out.extend_from_slice(BLOB_MAGIC);
    out.extend_from_slice(&(h.len() as u32).to_le_bytes());
    out.extend_from_slice(&(per as u32).to_le_bytes());
    for s in &h.strands {
        for p in s.points() {
            for c in p.iter() {
                out.extend_from_slice(&(*c as f32).to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn parse_blob(bytes: &[u8]) -> Result<Hairstyle> {
    if bytes.len() < 12 {
        return Err(HairIoError::TruncatedFile { needed: 12, got: bytes.len() });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if &magic != BLOB_MAGIC {
        return Err(HairIoError::BadMagic(magic));
    }
    let mut r = Reader { bytes, pos: 4 };
    let n = r.u32()? as usize;
    let per = r.u32()? as usize;
    let needed = 12 + 12 * n * per;
    if bytes.len() < needed {
        return Err(HairIoError::TruncatedFile { needed, got: bytes.len() });
    }
    let mut strands = Vec::with_capacity(n);
    for index in 0..n {
        let mut pts = Vec::with_capacity(per);
        for _ in 0..per {
            let x = r.f32()?;
            let y = r.f32()?;
            let z = r.f32()?;
            pts.push(Vec3::new(x as f64, y as f64, z as f64));
        }
        strands.push(Strand::new(pts).map_err(|_| HairIoError::InvalidStrand {
            index,
            reason: "fewer than 2 points or non-finite",
        })?);
    }
    Ok(Hairstyle { strands })
}

/// Parse either format, dispatching on the magic bytes.
pub fn parse_any(bytes: &[u8]) -> Result<Hairstyle> {
    match bytes.get(..4) {
        Some(m) if m == BLOB_MAGIC => parse_blob(bytes),
        _ => parse_hair_file(bytes),
    }
}

/// Resample a strand to `n` points with equal spacing along the output
/// polyline.
///
/// Consecutive output points are all exactly one chord length `c` apart and
/// lie on the input polyline; `c` is found by bisection so that the last step
/// lands on the input endpoint. Equal chords make the operation idempotent.
/// Coincident input points are merged first. Endpoints are copied exactly.
///
/// The chord walk needs the distance from each output point to grow along
/// the rest of the polyline (no fold-backs at the output spacing). When no
/// equal-chord solution is found the strand is sampled uniformly in input
/// arc length instead.
pub fn resample_strand(s: &Strand, n: usize) -> Result<Strand> {
    if n < 2 {
        return Err(HairIoError::TooFewPoints(n));
    }
    let mut pts: Vec<Vec3> = Vec::with_capacity(s.len());
    for p in s.points() {
        if pts.last() != Some(p) {
            pts.push(*p);
        }
    }
    if pts.len() < 2 {
        return Err(HairIoError::DegenerateStrand);
    }
    let arc = cumulative_length(&pts);
    let total = *arc.last().unwrap();
    if total <= 0.0 {
        return Err(HairIoError::DegenerateStrand);
    }
    let first = pts[0];
    let last = *pts.last().unwrap();
    if n == 2 {
        return Ok(Strand { points: vec![first, last] });
    }

    let mut lo = 0.0;
    let mut hi = total / (n - 1) as f64;
    let mut best: Option<(Vec<Vec3>, f64)> = None;
    if let Some(m) = march(&pts, &arc, hi, n) {
        // Straight input: the upper bound is already exact.
        if m.1 >= total * (1.0 - 1e-15) {
            best = Some(m);
        }
    }
    if best.is_none() {
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            match march(&pts, &arc, mid, n) {
                Some(m) => {
                    lo = mid;
                    best = Some(m);
                }
                None => hi = mid,
            }
        }
    }
    let remaining = best.as_ref().map_or(total, |b| total - b.1);
    let mut out = match best {
        Some((p, _)) if remaining <= 1e-9 * total => p,
        _ => arc_length_samples(&pts, &arc, n),
    };
    out[0] = first;
    out[n - 1] = last;
    Ok(Strand { points: out })
}

/// Walk `n - 1` chords of length `c` along the polyline. Returns the points
/// and the arc-length position of the last one, or `None` if the polyline ran
/// out first.
fn march(pts: &[Vec3], arc: &[f64], c: f64, n: usize) -> Option<(Vec<Vec3>, f64)> {
    let mut out = Vec::with_capacity(n);
    let mut q = pts[0];
    out.push(q);
    let mut seg = 0;
    let mut t0 = 0.0;
    let c2 = c * c;
    let mut pos = 0.0;
    while out.len() < n {
        let mut found = false;
        while seg + 1 < pts.len() {
            let a = pts[seg];
            let d = pts[seg + 1] - a;
            let f = a - q;
            // |f + t d|^2 = c^2, exit root
            let qa = d.norm_squared();
            let qb = 2.0 * f.dot(&d);
            let qc = f.norm_squared() - c2;
            let disc = qb * qb - 4.0 * qa * qc;
            if disc >= 0.0 {
                let t = (-qb + disc.sqrt()) / (2.0 * qa);
                if t >= t0 && t <= 1.0 + 1e-12 {
                    let t = t.min(1.0);
                    q = a + d * t;
                    t0 = t;
                    pos = arc[seg] + t * (arc[seg + 1] - arc[seg]);
                    found = true;
                    break;
                }
            }
            seg += 1;
            t0 = 0.0;
        }
        if !found {
            return None;
        }
        out.push(q);
    }
    Some((out, pos))
}

fn arc_length_samples(pts: &[Vec3], arc: &[f64], n: usize) -> Vec<Vec3> {
    let total = *arc.last().unwrap();
    let mut seg = 0;
    (0..n)
        .map(|i| {
            let target = total * i as f64 / (n - 1) as f64;
            while seg + 2 < arc.len() && arc[seg + 1] < target {
                seg += 1;
            }
            let len = arc[seg + 1] - arc[seg];
            let t = ((target - arc[seg]) / len).clamp(0.0, 1.0);
            pts[seg] + (pts[seg + 1] - pts[seg]) * t
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn strand(pts: &[[f64; 3]]) -> Strand {
        Strand::new(pts.iter().map(|p| Vec3::new(p[0], p[1], p[2])).collect()).unwrap()
    }

    fn minimal_file() -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(b"HAIR");
        b.extend_from_slice(&1u32.to_le_bytes());
        b.extend_from_slice(&2u32.to_le_bytes());
        b.extend_from_slice(&BIT_POINTS.to_le_bytes());
        b.extend_from_slice(&1u32.to_le_bytes());
        b.resize(HAIR_HEADER_LEN, 0);
        for c in [0.0f32, 0.0, 0.0, 0.0, 0.0, 1.0] {
            b.extend_from_slice(&c.to_le_bytes());
        }
        b
    }

    #[test]
    fn parses_minimal_file_with_default_segments() {
        let h = parse_hair_file(&minimal_file()).unwrap();
        assert_eq!(h.len(), 1);
        assert_eq!(h.strands[0].points(), &[Vec3::zeros(), Vec3::z()]);
    }

    #[test]
    fn rejects_bad_magic() {
        let mut b = minimal_file();
        b[0] = b'X';
        assert_eq!(parse_hair_file(&b), Err(HairIoError::BadMagic(*b"XAIR")));
    }

    #[test]
    fn rejects_truncated_points() {
        let b = minimal_file();
        assert!(matches!(
            parse_hair_file(&b[..b.len() - 4]),
            Err(HairIoError::TruncatedFile { .. })
        ));
    }

    #[test]
    fn rejects_inconsistent_counts() {
        let mut b = minimal_file();
        b[8..12].copy_from_slice(&3u32.to_le_bytes());
        assert_eq!(
            parse_hair_file(&b),
            Err(HairIoError::InconsistentCounts { declared: 3, implied: 2 })
        );
    }

    #[test]
    fn skips_optional_arrays() {
        let mut b = minimal_file();
        let flags = BIT_POINTS | BIT_THICKNESS | BIT_TRANSPARENCY | BIT_COLOR;
        b[12..16].copy_from_slice(&flags.to_le_bytes());
        b.extend(std::iter::repeat_n(0u8, 4 * 2 + 4 * 2 + 12 * 2));
        assert_eq!(parse_hair_file(&b).unwrap().len(), 1);
        b.pop();
        assert!(matches!(parse_hair_file(&b), Err(HairIoError::TruncatedFile { .. })));
    }

    #[test]
    fn write_one_strand() {
        let h = Hairstyle::new(vec![strand(&[[0.0; 3], [0.0, 0.0, 1.0]])]);
        let bytes = write_hair_file(&h).unwrap();
        assert_eq!(parse_hair_file(&bytes).unwrap().len(), 1);
    }

    #[test]
    fn write_empty_fails() {
        assert_eq!(write_hair_file(&Hairstyle::default()), Err(HairIoError::EmptyHairstyle));
        assert_eq!(write_blob(&Hairstyle::default()), Err(HairIoError::EmptyHairstyle));
    }

    #[test]
    fn resample_straight_segment() {
        let s = strand(&[[0.0; 3], [0.0, 0.0, 9.0]]);
        let r = resample_strand(&s, 10).unwrap();
        for (i, p) in r.points().iter().enumerate() {
            assert!((p.z - i as f64).abs() < 1e-9, "{i}: {p:?}");
            assert_eq!((p.x, p.y), (0.0, 0.0));
        }
    }

    #[test]
    fn resample_is_identity_on_uniform_input() {
        let pts: Vec<Vec3> = (0..20)
            .map(|i| {
                let a = i as f64 * 0.1;
                Vec3::new(a.cos(), a.sin(), 0.0)
            })
            .collect();
        let s = Strand::new(pts.clone()).unwrap();
        let r = resample_strand(&s, 20).unwrap();
        for (a, b) in r.points().iter().zip(&pts) {
            assert!((a - b).norm() < 1e-9);
        }
    }

    #[test]
    fn resample_merges_coincident_points() {
        let s = strand(&[[0.0; 3], [0.0; 3], [1.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        let r = resample_strand(&s, 5).unwrap();
        assert!((r.points()[2].x - 1.0).abs() < 1e-12);
    }

    #[test]
    fn resample_zero_length_fails() {
        let s = strand(&[[1.0; 3], [1.0; 3]]);
        assert_eq!(resample_strand(&s, 4), Err(HairIoError::DegenerateStrand));
        assert_eq!(resample_strand(&s, 1), Err(HairIoError::TooFewPoints(1)));
    }

    fn random_polyline() -> impl Strategy<Value = Strand> {
        prop::collection::vec((-0.5f64..0.5, -0.5f64..0.5, 1.0f64..2.0), 3..12).prop_map(|v| {
            // z-monotone with bounded lateral drift: never folds back
            let mut p = Vec3::zeros();
            let mut pts = vec![p];
            for (x, y, z) in v {
                p += Vec3::new(x, y, z);
                pts.push(p);
            }
            Strand::new(pts).unwrap()
        })
    }

    proptest! {
        #[test]
        fn resample_spacing_uniform_and_idempotent(s in random_polyline(), n in 3usize..60) {
            let r = resample_strand(&s, n).unwrap();
            prop_assert_eq!(r.points()[0], s.points()[0]);
            prop_assert_eq!(r.points()[n - 1], *s.points().last().unwrap());
            let gaps: Vec<f64> = r.points().windows(2).map(|w| (w[1] - w[0]).norm()).collect();
            let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
            for g in &gaps {
                prop_assert!((g - mean).abs() <= 1e-6 * mean);
            }
            let rr = resample_strand(&r, n).unwrap();
            for (a, b) in rr.points().iter().zip(r.points()) {
                prop_assert!((a - b).norm() < 1e-9);
            }
        }

        #[test]
        fn hair_round_trip_is_bitwise(strands in prop::collection::vec(
            prop::collection::vec((-10.0f32..10.0, -10.0f32..10.0, -10.0f32..10.0), 2..20), 1..30)) {
            let h = Hairstyle::new(strands.iter().map(|s| Strand::new(
                s.iter().map(|&(x, y, z)| Vec3::new(x as f64, y as f64, z as f64)).collect()).unwrap()).collect());
            let back = parse_hair_file(&write_hair_file(&h).unwrap()).unwrap();
            prop_assert_eq!(&back, &h);
            let again = write_hair_file(&back).unwrap();
            prop_assert_eq!(again, write_hair_file(&h).unwrap());
        }
    }

    #[test]
    fn blob_round_trip() {
        let h = Hairstyle::new(vec![
            strand(&[[0.0; 3], [0.25, 0.5, 1.0], [1.0, 1.0, 1.0]]),
            strand(&[[1.0; 3], [2.0, 0.5, 1.0], [3.0, 1.0, 1.0]]),
        ]);
        let b = write_blob(&h).unwrap();
        assert_eq!(b.len(), 12 + 2 * 3 * 12);
        assert_eq!(parse_any(&b).unwrap(), h);
    }
}
