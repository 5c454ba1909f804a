//! Analytical work, span and arithmetic-intensity model of interface
//! backpropagation.
//!
//! Every count is a leading-order term with its constant fixed to 1. Memory
//! traffic is counted in elements and converted to bytes only where an
//! intensity or payload is reported.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Compute-bound threshold of a bf16 H100-SXM5, in ops per byte.
pub const DEFAULT_ROOFLINE_OPS_PER_BYTE: f64 = 295.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionKind {
    Ssm,
    Transformer,
}

impl RegionKind {
    pub fn name(self) -> &'static str {
        match self {
            RegionKind::Ssm => "ssm",
            RegionKind::Transformer => "transformer",
        }
    }
}

/// Element width used to turn element counts into bytes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dtype {
    #[default]
    Bf16,
    F32,
    F64,
}

impl Dtype {
    pub fn bytes(self) -> usize {
        match self {
            Dtype::Bf16 => 2,
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "bf16" => Ok(Dtype::Bf16),
            "f32" => Ok(Dtype::F32),
            "f64" => Ok(Dtype::F64),
            other => Err(Error::Argument(format!("unknown dtype `{other}` (expected bf16, f32 or f64)"))),
        }
    }
}

/// Shape of one region's activations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionCostSpec {
    pub batch: usize,
    pub seq_len: usize,
    pub width: usize,
    /// SSM state size.
    pub state: usize,
    pub heads: usize,
    /// Transformer MLP width.
    pub mlp_width: usize,
    pub kind: RegionKind,
}

impl RegionCostSpec {
    /// The ~1B-parameter illustrative configuration: `B=8, L=2048, D=768,
    /// N=16, H=12, X=3072`.
    pub fn reference(kind: RegionKind) -> Self {
        RegionCostSpec { batch: 8, seq_len: 2048, width: 768, state: 16, heads: 12, mlp_width: 3072, kind }
    }

    /// Desk-scale counterpart: `B=8, L=128, D=64, N=16, H=4, X=256`.
    pub fn toy(kind: RegionKind) -> Self {
        RegionCostSpec { batch: 8, seq_len: 128, width: 64, state: 16, heads: 4, mlp_width: 256, kind }
    }

    pub fn validate(&self) -> Result<()> {
        let mut counts = vec![("B", self.batch), ("L", self.seq_len), ("D", self.width)];
        match self.kind {
            RegionKind::Ssm => counts.push(("N", self.state)),
            RegionKind::Transformer => counts.extend([("H", self.heads), ("X", self.mlp_width)]),
        }
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Argument(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// `d = B L D`, the flattened hidden-state size.
    pub fn hidden_size(&self) -> f64 {
        (self.batch * self.seq_len * self.width) as f64
    }
}

/// Forward FLOPs and memory traffic (elements) of one region.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ForwardCost {
    pub flops: f64,
    pub elements: f64,
}

/// `F_k`: SSM `B L D N`; Transformer `B L D^2 + B L^2 D + B L D X`.
/// `Q_k`: SSM `B L (D + N)`; Transformer `B L D + B H L^2 + B L X`.
pub fn forward_cost(spec: &RegionCostSpec) -> ForwardCost {
    let (b, l, d) = (spec.batch as f64, spec.seq_len as f64, spec.width as f64);
    match spec.kind {
        RegionKind::Ssm => {
            let n = spec.state as f64;
            ForwardCost { flops: b * l * d * n, elements: b * l * (d + n) }
        }
        RegionKind::Transformer => {
            let (h, x) = (spec.heads as f64, spec.mlp_width as f64);
            ForwardCost {
                flops: b * l * d * d + b * l * l * d + b * l * d * x,
                elements: b * l * d + b * h * l * l + b * l * x,
            }
        }
    }
}

/// Forward arithmetic intensity `F_k / (Q_k * bytes)`.
pub fn forward_intensity(spec: &RegionCostSpec, dtype: Dtype) -> f64 {
    let c = forward_cost(spec);
    c.flops / (c.elements * dtype.bytes() as f64)
}

/// Cost of materialising one `r x r` Jacobian with perfect activation reuse.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct JacobianCost {
    /// `W_J = r F_k`.
    pub flops: f64,
    /// `r F_k / (Q_k * bytes)`.
    pub intensity: f64,
}

pub fn jacobian_cost(spec: &RegionCostSpec, rank: usize, dtype: Dtype) -> Result<JacobianCost> {
    if rank == 0 {
        return Err(Error::Argument("rank must be at least 1".into()));
    }
    let r = rank as f64;
    Ok(JacobianCost { flops: r * forward_cost(spec).flops, intensity: r * forward_intensity(spec, dtype) })
}

/// Intensity when `chunk` basis directions share each activation load:
/// `c * I_fwd`.
pub fn effective_intensity(spec: &RegionCostSpec, rank: usize, chunk: usize, dtype: Dtype) -> Result<f64> {
    if chunk == 0 || chunk > rank {
        return Err(Error::Argument(format!("chunk {chunk} outside 1..={rank}")));
    }
    Ok(chunk as f64 * forward_intensity(spec, dtype))
}

/// Smallest chunk whose effective intensity reaches `threshold`, or `None`
/// when even `c = r` stays memory-bound.
pub fn min_compute_bound_chunk(spec: &RegionCostSpec, rank: usize, dtype: Dtype, threshold: f64) -> Option<usize> {
    let i_fwd = forward_intensity(spec, dtype);
    (1..=rank).find(|&c| c as f64 * i_fwd >= threshold)
}

/// `ceil(log2 K)`, the number of combine levels of a binary scan tree.
pub fn combine_levels(regions: usize) -> u32 {
    if regions <= 1 {
        0
    } else {
        usize::BITS - (regions - 1).leading_zeros()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct WorkSpan {
    pub work: f64,
    pub span: f64,
}

/// Suffix scan over `K` matrices of size `r x r`: work `K r^3`, span
/// `r^3 ceil(log2 K)`.
pub fn scan_cost(regions: usize, rank: usize) -> Result<WorkSpan> {
    if regions == 0 {
        return Err(Error::Argument("the scan needs at least one region".into()));
    }
    let r3 = (rank as f64).powi(3);
    Ok(WorkSpan { work: regions as f64 * r3, span: r3 * combine_levels(regions) as f64 })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    SequentialBp,
    FullRankScan,
    LbiScan,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::SequentialBp => "sequential_bp",
            Regime::FullRankScan => "full_rank_scan",
            Regime::LbiScan => "lbi_scan",
        }
    }
}

/// One row of the inter-region gradient transport comparison.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TransportRow {
    pub regime: Regime,
    /// FLOPs of one step (sequential) or one combine (scans).
    pub flops: f64,
    /// Critical-path FLOPs across `K` regions.
    pub span: f64,
    pub operator: String,
    pub intensity: f64,
    pub materializes_jacobian: bool,
}

impl TransportRow {
    /// Numeric columns, for comparing rows across regimes.
    pub fn costs(&self) -> (f64, f64, f64) {
        (self.flops, self.span, self.intensity)
    }
}

/// Sequential adjoint transport (`d^2` per step, span `K d^2`), full-rank
/// scan (`d^3` per combine) and interface scan (`r^3` per combine).
pub fn transport_table(hidden: f64, rank: usize, regions: usize) -> Result<Vec<TransportRow>> {
    let r = rank as f64;
    if rank == 0 || regions == 0 || hidden < r {
        return Err(Error::Argument(format!("need 1 <= r <= d and K >= 1 (d={hidden}, r={rank}, K={regions})")));
    }
    let levels = combine_levels(regions) as f64;
    let k = regions as f64;
    Ok(vec![
        TransportRow {
            regime: Regime::SequentialBp,
            flops: hidden * hidden,
            span: k * hidden * hidden,
            operator: "d x d matrix-vector".into(),
            intensity: 1.0,
            materializes_jacobian: false,
        },
        TransportRow {
            regime: Regime::FullRankScan,
            flops: hidden.powi(3),
            span: hidden.powi(3) * levels,
            operator: "d x d matrix-matrix".into(),
            intensity: hidden,
            materializes_jacobian: true,
        },
        TransportRow {
            regime: Regime::LbiScan,
            flops: r.powi(3),
            span: r.powi(3) * levels,
            operator: "r x r matrix-matrix".into(),
            intensity: r,
            materializes_jacobian: true,
        },
    ])
}

/// Work and span of each backward phase.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PhaseCosts {
    pub jacobian: WorkSpan,
    pub scan: WorkSpan,
    pub local: WorkSpan,
}

impl PhaseCosts {
    pub fn total_work(&self) -> f64 {
        self.jacobian.work + self.scan.work + self.local.work
    }

    pub fn total_span(&self) -> f64 {
        self.jacobian.span + self.scan.span + self.local.span
    }

    /// Fraction of all work spent in the scan.
    pub fn scan_share(&self) -> f64 {
        self.scan.work / self.total_work()
    }

    /// Total work relative to one standard backward (`sum F_k`).
    pub fn overhead_factor(&self) -> f64 {
        self.total_work() / self.local.work
    }
}

/// Phase 1 `sum W_J` (span `max W_J`), Phase 2 the scan, Phase 3 `sum F_k`
/// (span `max F_k`), with one spec per region.
pub fn span_decomposition(specs: &[RegionCostSpec], rank: usize) -> Result<PhaseCosts> {
    if specs.is_empty() {
        return Err(Error::Argument("need at least one region spec".into()));
    }
    let mut jac = WorkSpan { work: 0.0, span: 0.0 };
    let mut local = WorkSpan { work: 0.0, span: 0.0 };
    for s in specs {
        let f = forward_cost(s).flops;
        let w = jacobian_cost(s, rank, Dtype::Bf16)?.flops;
        jac.work += w;
        jac.span = jac.span.max(w);
        local.work += f;
        local.span = local.span.max(f);
    }
    Ok(PhaseCosts { jacobian: jac, scan: scan_cost(specs.len(), rank)?, local })
}

/// Bytes exchanged by the scan: `K r^2` elements.
pub fn payload_bytes(regions: usize, rank: usize, bytes_per_elem: usize) -> u64 {
    (regions * rank * rank * bytes_per_elem) as u64
}

/// One line of the intensity-versus-chunk table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IntensityRow {
    pub kind: RegionKind,
    pub forward: f64,
    /// `(c, c * I_fwd)` per requested chunk.
    pub chunks: Vec<(usize, f64)>,
    pub threshold: f64,
    pub min_chunk: Option<usize>,
}

pub fn intensity_row(spec: &RegionCostSpec, rank: usize, chunks: &[usize], dtype: Dtype, threshold: f64) -> Result<IntensityRow> {
    let chunks = chunks.iter().map(|&c| Ok((c, effective_intensity(spec, rank, c, dtype)?))).collect::<Result<_>>()?;
    Ok(IntensityRow {
        kind: spec.kind,
        forward: forward_intensity(spec, dtype),
        chunks,
        threshold,
        min_chunk: min_compute_bound_chunk(spec, rank, dtype, threshold),
    })
}

/// CSV with header `kind,i_fwd,c=..,threshold,min_chunk`.
pub fn intensity_csv(rows: &[IntensityRow]) -> String {
    let mut out = String::from("kind,i_fwd");
    if let Some(first) = rows.first() {
        for (c, _) in &first.chunks {
            let _ = write!(out, ",c={c}");
        }
    }
    out.push_str(",threshold,min_chunk\n");
    for row in rows {
        let _ = write!(out, "{},{:.4}", row.kind.name(), row.forward);
        for (_, v) in &row.chunks {
            let _ = write!(out, ",{v:.4}");
        }
        let min = row.min_chunk.map_or_else(|| "none".to_string(), |c| c.to_string());
        let _ = writeln!(out, ",{},{min}", row.threshold);
    }
    out
}

/// CSV with header `regime,flops,span,operator,intensity,materializes_jacobian`.
pub fn transport_csv(rows: &[TransportRow]) -> String {
    let mut out = String::from("regime,flops,span,operator,intensity,materializes_jacobian\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:.6e},{:.6e},{},{:.6e},{}",
            r.regime.name(),
            r.flops,
            r.span,
            r.operator,
            r.intensity,
            r.materializes_jacobian
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs()
    }

    #[test]
    fn reference_forward_intensities() {
        let ssm = RegionCostSpec::reference(RegionKind::Ssm);
        let tf = RegionCostSpec::reference(RegionKind::Transformer);
        // 768*16 / (784*2) and (768^2 + 2048*768 + 768*3072) / ((768 + 12*2048 + 3072)*2)
        assert!(rel(forward_intensity(&ssm, Dtype::Bf16), 12288.0 / 1568.0) < 1e-15);
        assert!(rel(forward_intensity(&tf, Dtype::Bf16), 4521984.0 / 56832.0) < 1e-15);
        assert_eq!(forward_cost(&ssm).flops, 201_326_592.0);
    }

    #[test]
    fn chunk_of_one_is_forward_intensity() {
        let ssm = RegionCostSpec::reference(RegionKind::Ssm);
        assert_eq!(effective_intensity(&ssm, 64, 1, Dtype::Bf16).unwrap(), forward_intensity(&ssm, Dtype::Bf16));
        assert!(effective_intensity(&ssm, 64, 0, Dtype::Bf16).is_err());
        assert!(effective_intensity(&ssm, 64, 65, Dtype::Bf16).is_err());
    }

    #[test]
    fn compute_bound_chunks() {
        let ssm = RegionCostSpec::reference(RegionKind::Ssm);
        let tf = RegionCostSpec::reference(RegionKind::Transformer);
        assert_eq!(min_compute_bound_chunk(&ssm, 64, Dtype::Bf16, DEFAULT_ROOFLINE_OPS_PER_BYTE), Some(38));
        assert_eq!(min_compute_bound_chunk(&tf, 64, Dtype::Bf16, DEFAULT_ROOFLINE_OPS_PER_BYTE), Some(4));
        assert_eq!(min_compute_bound_chunk(&ssm, 16, Dtype::Bf16, DEFAULT_ROOFLINE_OPS_PER_BYTE), None);
    }

    #[test]
    fn jacobian_cost_scales_with_rank() {
        let ssm = RegionCostSpec::reference(RegionKind::Ssm);
        assert_eq!(jacobian_cost(&ssm, 1, Dtype::Bf16).unwrap().flops, forward_cost(&ssm).flops);
        let total = 16.0 * jacobian_cost(&ssm, 64, Dtype::Bf16).unwrap().flops;
        assert!(rel(total, 2.06e11) < 0.01);
        assert!(jacobian_cost(&ssm, 0, Dtype::Bf16).is_err());
    }

    #[test]
    fn ssm_without_state_has_no_flops() {
        let spec = RegionCostSpec { state: 0, ..RegionCostSpec::reference(RegionKind::Ssm) };
        assert_eq!(forward_cost(&spec).flops, 0.0);
        assert!(spec.validate().is_err());
    }

    #[test]
    fn scan_work_and_levels() {
        let s = scan_cost(16, 64).unwrap();
        assert_eq!(s.work, 4_194_304.0);
        assert_eq!(s.span, 262_144.0 * 4.0);
        assert_eq!(scan_cost(1, 64).unwrap().span, 0.0);
        let levels: Vec<u32> = (1..=9).map(combine_levels).collect();
        assert_eq!(levels, vec![0, 1, 2, 2, 3, 3, 3, 3, 4]);
    }

    #[test]
    fn scan_is_negligible_next_to_construction() {
        for (kind, bound) in [(RegionKind::Ssm, 1e-4), (RegionKind::Transformer, 1e-7)] {
            let spec = RegionCostSpec::reference(kind);
            let jac = 16.0 * jacobian_cost(&spec, 64, Dtype::Bf16).unwrap().flops;
            assert!(scan_cost(16, 64).unwrap().work / jac < bound, "{kind:?}");
        }
    }

    #[test]
    fn transport_rows() {
        let d = RegionCostSpec::reference(RegionKind::Ssm).hidden_size();
        assert_eq!(d, 12_582_912.0);
        let rows = transport_table(d, 64, 16).unwrap();
        assert!(rel(rows[1].flops, 2.0e21) < 0.01);
        assert!(rel(rows[2].flops, 2.6e5) < 0.01);
        assert_eq!((rows[1].flops / rows[2].flops).log10().round(), 16.0);
        let same = transport_table(64.0, 64, 5).unwrap();
        assert_eq!(same[1].costs(), same[2].costs());
        assert_eq!(transport_table(100.0, 4, 1).unwrap()[0].span, 10_000.0);
        assert!(transport_table(8.0, 16, 2).is_err());
    }

    #[test]
    fn phase_decomposition() {
        let spec = RegionCostSpec::toy(RegionKind::Transformer);
        let p = span_decomposition(&vec![spec; 7], 64).unwrap();
        assert_eq!(p.jacobian.span, jacobian_cost(&spec, 64, Dtype::Bf16).unwrap().flops);
        assert!(p.scan_share() < 1e-3);
        assert!((p.overhead_factor() - 65.0).abs() < 0.01);
    }

    #[test]
    fn payloads() {
        assert_eq!(payload_bytes(7, 64, 2), 57_344);
        assert_eq!(payload_bytes(7, 16, 2), 3_584);
        assert_eq!(payload_bytes(7, 0, 2), 0);
    }

    #[test]
    fn csv_shapes() {
        let spec = RegionCostSpec::reference(RegionKind::Ssm);
        let row = intensity_row(&spec, 64, &[1, 16, 64], Dtype::Bf16, 295.0).unwrap();
        let csv = intensity_csv(&[row]);
        assert!(csv.starts_with("kind,i_fwd,c=1,c=16,c=64,threshold,min_chunk\nssm,7.8367,"));
        assert!(csv.trim_end().ends_with(",295,38"));
        let t = transport_csv(&transport_table(1e3, 8, 4).unwrap());
        assert_eq!(t.lines().count(), 4);
    }

    #[test]
    fn dtype_parse() {
        assert_eq!(Dtype::parse("f32").unwrap().bytes(), 4);
        assert!(Dtype::parse("fp8").is_err());
    }
}
