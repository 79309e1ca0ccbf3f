//! Node placement on a wrap-around rectangle.
//!
//! Positions are immutable once a [`Topology`] exists. The [`GridIndex`]
//! buckets nodes into square cells so that range queries touch a handful of
//! cells instead of the whole network.

use std::collections::HashSet;
use std::fmt::Write as _;

use rand::Rng;

use crate::error::TopologyError;
use crate::sinr::PhysicalConfig;
use crate::NodeId;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Position {
    pub x: f64,
    pub y: f64,
}

impl Position {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    width: f64,
    height: f64,
    positions: Vec<Position>,
}

impl Topology {
    /// Validates bounds and distinctness.
    pub fn new(width: f64, height: f64, positions: Vec<Position>) -> Result<Self, TopologyError> {
        if !(width.is_finite() && width > 0.0 && height.is_finite() && height > 0.0) {
            return Err(TopologyError::BadExtent { width, height });
        }
        if positions.is_empty() {
            return Err(TopologyError::Empty);
        }
        let mut seen = HashSet::with_capacity(positions.len());
        for (i, p) in positions.iter().enumerate() {
            if !(p.x >= 0.0 && p.x < width && p.y >= 0.0 && p.y < height) {
                return Err(TopologyError::OutOfBounds { node: i, x: p.x, y: p.y });
            }
            if !seen.insert(position_key(p)) {
                return Err(TopologyError::DuplicatePosition { node: i });
            }
        }
        Ok(Self { width, height, positions })
    }

    pub fn width(&self) -> f64 {
        self.width
    }

    pub fn height(&self) -> f64 {
        self.height
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[Position] {
        &self.positions
    }

    pub fn position(&self, v: NodeId) -> Position {
        self.positions[v.index()]
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> {
        (0..self.positions.len()).map(NodeId::from)
    }

    /// Minimal per-axis displacement from `a` to `b` under wrap-around.
    pub fn displacement(&self, a: Position, b: Position) -> (f64, f64) {
        (wrap_delta(b.x - a.x, self.width), wrap_delta(b.y - a.y, self.height))
    }

    pub fn distance(&self, a: NodeId, b: NodeId) -> f64 {
        torus_distance(self.position(a), self.position(b), self)
    }

    /// Serializes to the line-oriented text format: `width height n`, then
    /// one `x y` pair per line.
    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.positions.len() * 40 + 32);
        let _ = writeln!(out, "{} {} {}", exact_decimal(self.width), exact_decimal(self.height), self.len());
        for p in &self.positions {
            let _ = writeln!(out, "{} {}", exact_decimal(p.x), exact_decimal(p.y));
        }
        out
    }

    /// Parses the text format written by [`Topology::to_text`]. Blank lines
    /// and lines starting with `#` are ignored.
    pub fn from_text(text: &str) -> Result<Self, TopologyError> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

        let (hline, header) = lines.next().ok_or(TopologyError::Parse { line: 0, message: "missing header".into() })?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(TopologyError::Parse {
                line: hline,
                message: format!("header needs `width height n`, got {} fields", fields.len()),
            });
        }
        let width = parse_f64(fields[0], hline)?;
        let height = parse_f64(fields[1], hline)?;
        let n: usize = fields[2].parse().map_err(|_| TopologyError::Parse {
            line: hline,
            message: format!("bad node count `{}`", fields[2]),
        })?;

        // n comes from untrusted input; never pre-allocate from it alone.
        let mut positions = Vec::with_capacity(n.min(1 << 16));
        for (line, l) in lines {
            if positions.len() == n {
                return Err(TopologyError::Parse { line, message: format!("more than {n} positions") });
            }
            let mut it = l.split_whitespace();
            let (Some(xs), Some(ys), None) = (it.next(), it.next(), it.next()) else {
                return Err(TopologyError::Parse { line, message: "expected `x y`".into() });
            };
            positions.push(Position::new(parse_f64(xs, line)?, parse_f64(ys, line)?));
        }
        if positions.len() != n {
            return Err(TopologyError::Parse {
                line: 0,
                message: format!("header declares {n} positions, found {}", positions.len()),
            });
        }
        Self::new(width, height, positions)
    }
}

fn parse_f64(s: &str, line: usize) -> Result<f64, TopologyError> {
    s.parse::<f64>()
        .map_err(|_| TopologyError::Parse { line, message: format!("bad number `{s}`") })
}

/// Shortest round-trip decimal, zero-padded to at least 9 significant digits.
pub(crate) fn exact_decimal(x: f64) -> String {
    let mut s = format!("{x}");
    let sig = s
        .chars()
        .filter(|c| c.is_ascii_digit())
        .skip_while(|&c| c == '0')
        .count();
    if sig < 9 && x.is_finite() {
        if !s.contains('.') {
            s.push('.');
        }
        let pad = if x == 0.0 { 8 } else { 9 - sig };
        s.extend(std::iter::repeat('0').take(pad));
    }
    s
}

fn position_key(p: &Position) -> (u64, u64) {
    // +0.0 and -0.0 are the same point.
    ((p.x + 0.0).to_bits(), (p.y + 0.0).to_bits())
}

fn wrap_delta(d: f64, extent: f64) -> f64 {
    let d = d.abs() % extent;
    d.min(extent - d)
}

/// Euclidean distance with each axis delta taken the short way around.
pub fn torus_distance(a: Position, b: Position, topo: &Topology) -> f64 {
    torus_distance_sq(a, b, topo.width, topo.height).sqrt()
}

#[inline]
pub(crate) fn torus_distance_sq(a: Position, b: Position, width: f64, height: f64) -> f64 {
    let dx = wrap_delta(a.x - b.x, width);
    let dy = wrap_delta(a.y - b.y, height);
    dx * dx + dy * dy
}

fn draw_distinct<R: Rng + ?Sized>(
    rng: &mut R,
    seen: &mut HashSet<(u64, u64)>,
    x0: f64,
    y0: f64,
    w: f64,
    h: f64,
    width: f64,
    height: f64,
) -> Position {
    loop {
        let x = x0 + rng.gen::<f64>() * w;
        let y = y0 + rng.gen::<f64>() * h;
        // Rounding can land exactly on the far edge.
        if x >= width || y >= height || x >= x0 + w || y >= y0 + h {
            continue;
        }
        let p = Position::new(x, y);
        if seen.insert(position_key(&p)) {
            return p;
        }
    }
}

/// `n` positions i.i.d. uniform on `[0,width) x [0,height)`.
pub fn gen_uniform<R: Rng + ?Sized>(n: usize, width: f64, height: f64, rng: &mut R) -> Result<Topology, TopologyError> {
    if n == 0 {
        return Err(TopologyError::Empty);
    }
    if !(width.is_finite() && width > 0.0 && height.is_finite() && height > 0.0) {
        return Err(TopologyError::BadExtent { width, height });
    }
    let mut seen = HashSet::with_capacity(n);
    let positions = (0..n)
        .map(|_| draw_distinct(rng, &mut seen, 0.0, 0.0, width, height, width, height))
        .collect();
    Ok(Topology { width, height, positions })
}

/// A heterogeneous placement together with the sub-square each node was
/// drawn in.
#[derive(Debug, Clone)]
pub struct HetLayout {
    pub topology: Topology,
    pub grid_side: usize,
    pub sub_size: f64,
    /// Sub-square index (`row * grid_side + col`) per node.
    pub cell_of: Vec<usize>,
    /// Node count per sub-square.
    pub counts: Vec<usize>,
}

impl HetLayout {
    /// Bounds `[x0, x1) x [y0, y1)` of a sub-square.
    pub fn cell_bounds(&self, cell: usize) -> (f64, f64, f64, f64) {
        let col = (cell % self.grid_side) as f64;
        let row = (cell / self.grid_side) as f64;
        (col * self.sub_size, (col + 1.0) * self.sub_size, row * self.sub_size, (row + 1.0) * self.sub_size)
    }
}

/// `grid_side x grid_side` sub-squares of side `sub_size`, each holding a
/// node count drawn uniformly from `[lambda_min, lambda_max]`.
pub fn gen_het<R: Rng + ?Sized>(
    grid_side: usize,
    sub_size: f64,
    lambda_min: usize,
    lambda_max: usize,
    rng: &mut R,
) -> Result<HetLayout, TopologyError> {
    if grid_side == 0 || !(sub_size.is_finite() && sub_size > 0.0) {
        return Err(TopologyError::BadExtent { width: grid_side as f64 * sub_size, height: sub_size });
    }
    if lambda_min > lambda_max {
        return Err(TopologyError::BadLambda { min: lambda_min, max: lambda_max });
    }
    let side = grid_side as f64 * sub_size;
    let cells = grid_side * grid_side;
    let counts: Vec<usize> = (0..cells).map(|_| rng.gen_range(lambda_min..=lambda_max)).collect();
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(TopologyError::Empty);
    }
    let mut seen = HashSet::with_capacity(total);
    let mut positions = Vec::with_capacity(total);
    let mut cell_of = Vec::with_capacity(total);
    for (cell, &count) in counts.iter().enumerate() {
        let x0 = (cell % grid_side) as f64 * sub_size;
        let y0 = (cell / grid_side) as f64 * sub_size;
        for _ in 0..count {
            positions.push(draw_distinct(rng, &mut seen, x0, y0, sub_size, sub_size, side, side));
            cell_of.push(cell);
        }
    }
    Ok(HetLayout {
        topology: Topology { width: side, height: side, positions },
        grid_side,
        sub_size,
        cell_of,
        counts,
    })
}

/// Transmission range `R1` and critical interference range `R2 = c * R1`
/// with `c = max(2, ceil((1/eps)^(1/(alpha-2))))`.
pub fn zone_radii(phys: &PhysicalConfig) -> Result<(f64, f64), TopologyError> {
    if !(phys.alpha > 2.0) {
        return Err(TopologyError::ZoneExponent { alpha: phys.alpha });
    }
    let r1 = (phys.power / (phys.beta * phys.theta)).powf(1.0 / phys.alpha);
    let raw = (1.0 / phys.epsilon).powf(1.0 / (phys.alpha - 2.0));
    // Absorb representation error so 3.0000000000000004 does not ceil to 4.
    let c = (raw - 1e-9).ceil().max(2.0);
    Ok((r1, c * r1))
}

/// Uniform square cells over the torus.
#[derive(Debug, Clone)]
pub struct GridIndex {
    cell_size: f64,
    cols: usize,
    rows: usize,
    buckets: Vec<Vec<NodeId>>,
}

impl GridIndex {
    pub fn build(topo: &Topology, cell_size: f64) -> Self {
        assert!(cell_size.is_finite() && cell_size > 0.0, "cell_size must be positive");
        // Cap the cell count; tiny cells on a big plane only waste memory.
        let cell_size = cell_size.max(topo.width.max(topo.height) / 4096.0);
        let cols = ((topo.width / cell_size).ceil() as usize).max(1);
        let rows = ((topo.height / cell_size).ceil() as usize).max(1);
        let mut buckets = vec![Vec::new(); cols * rows];
        let mut index = Self { cell_size, cols, rows, buckets: Vec::new() };
        for v in topo.node_ids() {
            let (cx, cy) = index.cell_of(topo.position(v));
            buckets[cy * cols + cx].push(v);
        }
        index.buckets = buckets;
        index
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.cols, self.rows)
    }

    pub fn cell_of(&self, p: Position) -> (usize, usize) {
        let cx = ((p.x / self.cell_size) as usize).min(self.cols - 1);
        let cy = ((p.y / self.cell_size) as usize).min(self.rows - 1);
        (cx, cy)
    }

    pub fn bucket(&self, cx: usize, cy: usize) -> &[NodeId] {
        &self.buckets[cy * self.cols + cx]
    }

    /// Visits every cell that may hold points within `r` of `p`, each at
    /// most once.
    pub(crate) fn for_each_cell_near(&self, p: Position, r: f64, mut f: impl FnMut(usize, usize)) {
        let (cx, cy) = self.cell_of(p);
        // One spare ring covers the narrower last cell at the wrap seam.
        let reach = (r / self.cell_size).ceil() as usize + 1;
        let xs = axis_cells(cx, reach, self.cols);
        let ys = axis_cells(cy, reach, self.rows);
        for &y in &ys {
            for &x in &xs {
                f(x, y);
            }
        }
    }
}

fn axis_cells(center: usize, reach: usize, count: usize) -> Vec<usize> {
    if 2 * reach + 1 >= count {
        return (0..count).collect();
    }
    (0..=2 * reach).map(|k| (center + count + k - reach) % count).collect()
}

/// All nodes `u != v` with `torus_distance(u, v) <= r`, ascending.
pub fn nodes_within(topo: &Topology, index: &GridIndex, v: NodeId, r: f64) -> Vec<NodeId> {
    let center = topo.position(v);
    let r_sq = r * r;
    let mut out = Vec::new();
    index.for_each_cell_near(center, r, |cx, cy| {
        for &u in index.bucket(cx, cy) {
            if u != v && torus_distance_sq(center, topo.position(u), topo.width, topo.height) <= r_sq {
                out.push(u);
            }
        }
    });
    out.sort_unstable();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn square(side: f64, pts: &[(f64, f64)]) -> Topology {
        Topology::new(side, side, pts.iter().map(|&(x, y)| Position::new(x, y)).collect()).unwrap()
    }

    #[test]
    fn wrap_distances() {
        let t = square(25.0, &[(0.0, 0.0)]);
        let d = |a: (f64, f64), b: (f64, f64)| torus_distance(Position::new(a.0, a.1), Position::new(b.0, b.1), &t);
        assert_eq!(d((0.0, 0.0), (24.0, 0.0)), 1.0);
        assert_eq!(d((0.0, 0.0), (12.5, 0.0)), 12.5);
        assert!((d((1.0, 1.0), (24.0, 24.0)) - 8f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn rejects_duplicates_and_bounds() {
        let dup = Topology::new(5.0, 5.0, vec![Position::new(1.0, 1.0), Position::new(1.0, 1.0)]);
        assert!(matches!(dup, Err(TopologyError::DuplicatePosition { node: 1 })));
        let oob = Topology::new(5.0, 5.0, vec![Position::new(5.0, 1.0)]);
        assert!(matches!(oob, Err(TopologyError::OutOfBounds { .. })));
        assert!(matches!(Topology::new(5.0, 5.0, vec![]), Err(TopologyError::Empty)));
    }

    #[test]
    fn uniform_single_node_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = gen_uniform(1, 25.0, 25.0, &mut rng).unwrap();
        assert_eq!(t.len(), 1);
        let a = gen_uniform(500, 25.0, 25.0, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        let b = gen_uniform(500, 25.0, 25.0, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn uniform_mean_near_center() {
        let t = gen_uniform(10_000, 25.0, 25.0, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mean = t.positions().iter().map(|p| p.x).sum::<f64>() / t.len() as f64;
        assert!((mean - 12.5).abs() < 0.5, "mean {mean}");
    }

    #[test]
    fn het_counts_and_membership() {
        let layout = gen_het(5, 5.0, 20, 1000, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        assert_eq!(layout.counts.len(), 25);
        assert!(layout.counts.iter().all(|&c| (20..=1000).contains(&c)));
        assert_eq!(layout.topology.len(), layout.counts.iter().sum::<usize>());
        for (i, p) in layout.topology.positions().iter().enumerate() {
            let (x0, x1, y0, y1) = layout.cell_bounds(layout.cell_of[i]);
            assert!(p.x >= x0 && p.x < x1 && p.y >= y0 && p.y < y1);
        }
    }

    #[test]
    fn het_degenerate_cell() {
        let layout = gen_het(1, 25.0, 7, 7, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(layout.topology.len(), 7);
        assert_eq!(layout.topology.width(), 25.0);
    }

    #[test]
    fn zone_radii_examples() {
        let phys = PhysicalConfig::default();
        let (r1, r2) = zone_radii(&phys).unwrap();
        assert!((r1 - 4f64.powf(1.0 / 3.0)).abs() < 1e-12);
        assert!((r1 - 1.5874).abs() < 1e-4);
        // eps = 1/3, alpha = 3: c = max(2, 3) = 3.
        assert!((r2 - 3.0 * r1).abs() < 1e-12);

        let unit = PhysicalConfig { power: 2.0, beta: 2.0, theta: 1.0, alpha: 4.5, ..phys };
        assert!((zone_radii(&unit).unwrap().0 - 1.0).abs() < 1e-15);

        let bad = PhysicalConfig { alpha: 2.0, ..phys };
        assert!(zone_radii(&bad).is_err());
    }

    #[test]
    fn nodes_within_boundaries() {
        let t = square(10.0, &[(0.0, 0.0), (1.0, 0.0), (9.5, 0.0)]);
        let idx = GridIndex::build(&t, 1.5);
        assert!(nodes_within(&t, &idx, NodeId(0), 0.0).is_empty());
        assert_eq!(nodes_within(&t, &idx, NodeId(0), 1.0), vec![NodeId(1), NodeId(2)]);
        assert_eq!(nodes_within(&t, &idx, NodeId(1), 1.0), vec![NodeId(0)]);
    }

    #[test]
    fn text_format_round_trip() {
        let t = gen_uniform(50, 25.0, 25.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let text = t.to_text();
        assert!(text.starts_with("25.0000000 25.0000000 50\n"));
        assert_eq!(Topology::from_text(&text).unwrap(), t);
    }

    #[test]
    fn text_format_errors() {
        assert!(Topology::from_text("").is_err());
        assert!(Topology::from_text("1 1 2\n0.1 0.1\n").is_err());
        assert!(Topology::from_text("1 1 1\n0.1 0.1\n0.2 0.2\n").is_err());
        assert!(Topology::from_text("1 1 1\n0.1\n").is_err());
        assert!(Topology::from_text("1 1 1\n2 0.1\n").is_err());
        assert!(Topology::from_text("1 1 99999999999999\n").is_err());
    }

    #[test]
    fn exact_decimal_padding() {
        assert_eq!(exact_decimal(0.5), "0.500000000");
        assert_eq!(exact_decimal(25.0), "25.0000000");
        assert_eq!(exact_decimal(0.0), "0.00000000");
        let x = 0.123456789012345_f64;
        assert_eq!(exact_decimal(x).parse::<f64>().unwrap(), x);
    }
}
