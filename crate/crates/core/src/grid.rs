//! Regularized quadtree grids built from seeding points.
//!
//! The grid is a forest of quadtrees, one per base cell, stored as a linear
//! (leaves-only) set keyed by `(level, i, j)`. Leaves are kept sorted by the
//! Morton code of their anchor on the finest index grid, which makes the key
//! range of any cell contiguous and turns containment queries into range
//! scans. Construction refines every leaf holding a seed point to the
//! maximum level and then rebalances so that no two leaves sharing an edge
//! or a corner differ by more than one level. Balancing only refines.

use std::collections::VecDeque;
use std::fmt::Write as _;

use rustc_hash::{FxHashMap, FxHashSet};

use crate::error::{Result, SolverError};

/// Hard cap on the refinement level so finest-grid indices fit in `u32`.
pub const LEVEL_CAP: u8 = 24;

/// Identity of a (not necessarily leaf) quadtree cell: refinement level and
/// column/row index on that level's uniform grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellId {
    pub level: u8,
    pub i: u32,
    pub j: u32,
}

impl CellId {
    pub fn new(level: u8, i: u32, j: u32) -> Self {
        CellId { level, i, j }
    }

    pub fn parent(self) -> Option<CellId> {
        (self.level > 1).then(|| CellId::new(self.level - 1, self.i / 2, self.j / 2))
    }

    /// Children in (SW, SE, NW, NE) order.
    pub fn children(self) -> [CellId; 4] {
        let (l, i, j) = (self.level + 1, 2 * self.i, 2 * self.j);
        [
            CellId::new(l, i, j),
            CellId::new(l, i + 1, j),
            CellId::new(l, i, j + 1),
            CellId::new(l, i + 1, j + 1),
        ]
    }

    /// Base-level ancestor (the root of this cell's tree in the forest).
    pub fn base_ancestor(self) -> CellId {
        let s = self.level - 1;
        CellId::new(1, self.i >> s, self.j >> s)
    }

    /// Anchor (lower-left corner) on the finest index grid of `max_level`.
    fn anchor(self, max_level: u8) -> (u64, u64) {
        let s = max_level - self.level;
        ((self.i as u64) << s, (self.j as u64) << s)
    }

    /// Side length in finest-grid cells.
    fn span(self, max_level: u8) -> u64 {
        1u64 << (max_level - self.level)
    }

    fn morton(self, max_level: u8) -> u64 {
        let (x, y) = self.anchor(max_level);
        interleave(x) | (interleave(y) << 1)
    }
}

/// Spread the low 32 bits of `x`, inserting a zero between consecutive bits.
fn interleave(x: u64) -> u64 {
    let mut x = x & 0xffff_ffff;
    x = (x | (x << 16)) & 0x0000_ffff_0000_ffff;
    x = (x | (x << 8)) & 0x00ff_00ff_00ff_00ff;
    x = (x | (x << 4)) & 0x0f0f_0f0f_0f0f_0f0f;
    x = (x | (x << 2)) & 0x3333_3333_3333_3333;
    x = (x | (x << 1)) & 0x5555_5555_5555_5555;
    x
}

/// Axis-aligned rectangle, used for the computational domain.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Rect { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }
}

/// Cardinal directions; `West`/`East` are the -x/+x sides.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    West,
    East,
    South,
    North,
}

impl Side {
    pub const ALL: [Side; 4] = [Side::West, Side::East, Side::South, Side::North];
}

/// Face orientation: `X` faces have an x-directed normal (vertical faces).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
}

/// What lies beyond a boundary segment.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exterior {
    /// A side of the domain bounding box.
    Domain(Side),
    /// An inactive (masked-out) region inside the bounding box.
    Hole,
}

/// One side of a face segment.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SegSide {
    Leaf(u32),
    Exterior(Exterior),
}

impl SegSide {
    pub fn leaf(&self) -> Option<usize> {
        match self {
            SegSide::Leaf(i) => Some(*i as usize),
            SegSide::Exterior(_) => None,
        }
    }
}

/// Shared interface segment between two leaves, or between a leaf and the
/// boundary. A coarse face abutting two finer neighbors is represented by
/// two segments, each spanning the finer face.
#[derive(Clone, Copy, Debug)]
pub struct FaceSegment {
    pub axis: Axis,
    /// Cell on the -x (for `Axis::X`) or -y (for `Axis::Y`) side.
    pub minus: SegSide,
    /// Cell on the +x / +y side.
    pub plus: SegSide,
    pub midpoint: (f64, f64),
    pub length: f64,
}

impl FaceSegment {
    pub fn is_boundary(&self) -> bool {
        matches!(self.minus, SegSide::Exterior(_)) || matches!(self.plus, SegSide::Exterior(_))
    }
}

/// Reference from a leaf to one of its segments. `outward > 0` when the
/// segment lies on the leaf's east/north face.
#[derive(Clone, Copy, Debug)]
pub struct SegRef {
    pub seg: u32,
    pub outward: i8,
}

/// A leaf cell with precomputed geometry.
#[derive(Clone, Copy, Debug)]
pub struct Cell {
    pub id: CellId,
    pub center: (f64, f64),
    pub size: (f64, f64),
}

impl Cell {
    pub fn level(&self) -> u8 {
        self.id.level
    }

    pub fn area(&self) -> f64 {
        self.size.0 * self.size.1
    }
}

#[derive(Clone, Debug)]
struct SegmentData {
    segments: Vec<FaceSegment>,
    // CSR adjacency: segments of leaf k are seg_refs[seg_off[k]..seg_off[k+1]]
    seg_off: Vec<u32>,
    seg_refs: Vec<SegRef>,
}

/// Regularized quadtree grid over a rectangular domain.
#[derive(Clone, Debug)]
pub struct QuadtreeGrid {
    domain: Rect,
    base_shape: (u32, u32),
    max_level: u8,
    base_cell: (f64, f64),
    cells: Vec<Cell>,
    index: FxHashMap<CellId, u32>,
    active_base: Option<FxHashSet<u64>>,
    regular: bool,
    segs: Option<SegmentData>,
    min_cell: (f64, f64),
    total_area: f64,
}

/// Construction-time topology context.
struct Topo<'a> {
    base: (u32, u32),
    max_level: u8,
    active_base: Option<&'a FxHashSet<u64>>,
}

/// Result of looking across one face of a cell.
enum Across {
    Outside(Side),
    Hole,
    Leaves(Vec<CellId>),
}

impl<'a> Topo<'a> {
    fn cells_on_level(&self, level: u8) -> (u64, u64) {
        let s = level - 1;
        ((self.base.0 as u64) << s, (self.base.1 as u64) << s)
    }

    fn base_active(&self, id: CellId) -> bool {
        match self.active_base {
            None => true,
            Some(set) => {
                let b = id.base_ancestor();
                set.contains(&(((b.i as u64) << 32) | b.j as u64))
            }
        }
    }

    fn same_level_neighbor(&self, id: CellId, side: Side) -> Option<CellId> {
        let (nx, ny) = self.cells_on_level(id.level);
        match side {
            Side::West => (id.i > 0).then(|| CellId::new(id.level, id.i - 1, id.j)),
            Side::East => ((id.i as u64) + 1 < nx).then(|| CellId::new(id.level, id.i + 1, id.j)),
            Side::South => (id.j > 0).then(|| CellId::new(id.level, id.i, id.j - 1)),
            Side::North => ((id.j as u64) + 1 < ny).then(|| CellId::new(id.level, id.i, id.j + 1)),
        }
    }

    /// The leaf equal to `id` or one of its ancestors, if present.
    fn find_covering(&self, set: &FxHashSet<CellId>, id: CellId) -> Option<CellId> {
        let mut c = id;
        loop {
            if set.contains(&c) {
                return Some(c);
            }
            c = c.parent()?;
        }
    }

    /// All leaves across `side` of `id`. Descends into finer cells touching
    /// the shared face; on a regularized grid this yields at most two.
    fn across_face(&self, set: &FxHashSet<CellId>, id: CellId, side: Side) -> Across {
        let Some(n) = self.same_level_neighbor(id, side) else {
            return Across::Outside(side);
        };
        if !self.base_active(n) {
            return Across::Hole;
        }
        if let Some(leaf) = self.find_covering(set, n) {
            return Across::Leaves(vec![leaf]);
        }
        // The region is refined; collect the children stacked along the face.
        let mut out = Vec::with_capacity(2);
        let mut stack = vec![n];
        while let Some(c) = stack.pop() {
            if set.contains(&c) {
                out.push(c);
                continue;
            }
            if c.level >= self.max_level {
                // Nothing covers this patch: a masked hole at sub-base
                // granularity cannot occur, so the tiling is broken.
                return Across::Hole;
            }
            let ch = c.children();
            // Children adjacent to the face we came from.
            let pair = match side {
                Side::West => [ch[1], ch[3]],  // their east edge touches us
                Side::East => [ch[0], ch[2]],
                Side::South => [ch[2], ch[3]], // their north edge touches us
                Side::North => [ch[0], ch[1]],
            };
            stack.push(pair[1]);
            stack.push(pair[0]);
        }
        out.sort_by_key(|c| c.anchor(self.max_level));
        Across::Leaves(out)
    }

    /// The leaf whose closure contains the corner-adjacent point of `id` in
    /// diagonal direction (`sx`, `sy`) with `sx`, `sy` in {-1, +1}.
    fn across_corner(&self, set: &FxHashSet<CellId>, id: CellId, sx: i8, sy: i8) -> Option<CellId> {
        let (ax, ay) = id.anchor(self.max_level);
        let span = id.span(self.max_level);
        let (fnx, fny) = self.cells_on_level(self.max_level);
        let fx = if sx > 0 { ax + span } else { ax.checked_sub(1)? };
        let fy = if sy > 0 { ay + span } else { ay.checked_sub(1)? };
        if fx >= fnx || fy >= fny {
            return None;
        }
        for level in (1..=self.max_level).rev() {
            let s = self.max_level - level;
            let c = CellId::new(level, (fx >> s) as u32, (fy >> s) as u32);
            if set.contains(&c) {
                return Some(c);
            }
        }
        None
    }

    /// A leaf violates 2:1 balance if any edge- or corner-adjacent leaf is
    /// more than one level finer.
    fn violates_balance(&self, set: &FxHashSet<CellId>, id: CellId) -> bool {
        let cap = id.level + 1;
        for side in Side::ALL {
            if let Across::Leaves(ls) = self.across_face(set, id, side) {
                if ls.iter().any(|l| l.level > cap) {
                    return true;
                }
            }
        }
        for (sx, sy) in [(-1, -1), (1, -1), (-1, 1), (1, 1)] {
            if let Some(l) = self.across_corner(set, id, sx, sy) {
                if l.level > cap {
                    return true;
                }
            }
        }
        false
    }

    /// Leaves touching `id` (edges and corners); used to requeue balance
    /// checks after a refinement.
    fn touching(&self, set: &FxHashSet<CellId>, id: CellId) -> Vec<CellId> {
        let mut out = Vec::new();
        for side in Side::ALL {
            if let Across::Leaves(ls) = self.across_face(set, id, side) {
                out.extend(ls);
            }
        }
        for (sx, sy) in [(-1, -1), (1, -1), (-1, 1), (1, 1)] {
            if let Some(l) = self.across_corner(set, id, sx, sy) {
                out.push(l);
            }
        }
        out
    }

    /// Enforce 2:1 balance by refinement only.
    fn regularize(&self, set: &mut FxHashSet<CellId>) {
        let mut queue: VecDeque<CellId> = set.iter().copied().collect();
        while let Some(c) = queue.pop_front() {
            if !set.contains(&c) {
                continue;
            }
            if !self.violates_balance(set, c) {
                continue;
            }
            let affected = self.touching(set, c);
            set.remove(&c);
            for ch in c.children() {
                set.insert(ch);
                queue.push_back(ch);
            }
            for a in affected {
                queue.push_back(a);
            }
        }
    }
}

impl QuadtreeGrid {
    /// Build a regularized grid: every leaf containing a seed point is
    /// refined to `max_level`, then the grid is rebalanced.
    pub fn build(
        domain: Rect,
        base_shape: (u32, u32),
        max_level: u8,
        seeds: &[(f64, f64)],
    ) -> Result<Self> {
        Self::build_masked(domain, base_shape, max_level, seeds, |_, _| true)
    }

    /// Like [`QuadtreeGrid::build`], with base cells deactivated wherever
    /// `active(center, size)` is false. Inactive regions behave as solid
    /// obstacles: their faces become `Exterior::Hole` boundary segments.
    pub fn build_masked(
        domain: Rect,
        base_shape: (u32, u32),
        max_level: u8,
        seeds: &[(f64, f64)],
        active: impl Fn((f64, f64), (f64, f64)) -> bool,
    ) -> Result<Self> {
        validate_params(domain, base_shape, max_level)?;
        let (nx, ny) = base_shape;
        let base_cell = (domain.width() / nx as f64, domain.height() / ny as f64);

        let mut active_base: FxHashSet<u64> = FxHashSet::default();
        let mut all_active = true;
        for i in 0..nx {
            for j in 0..ny {
                let center = (
                    domain.x0 + (i as f64 + 0.5) * base_cell.0,
                    domain.y0 + (j as f64 + 0.5) * base_cell.1,
                );
                if active(center, base_cell) {
                    active_base.insert(((i as u64) << 32) | j as u64);
                } else {
                    all_active = false;
                }
            }
        }
        if active_base.is_empty() {
            return Err(SolverError::InvalidInput("no active base cells".into()));
        }
        let mask = (!all_active).then_some(active_base);

        let topo = Topo { base: base_shape, max_level, active_base: mask.as_ref() };
        let mut set: FxHashSet<CellId> = FxHashSet::default();
        for i in 0..nx {
            for j in 0..ny {
                let id = CellId::new(1, i, j);
                if topo.base_active(id) {
                    set.insert(id);
                }
            }
        }

        for &(sx, sy) in seeds {
            if !domain.contains(sx, sy) {
                return Err(SolverError::SeedOutsideDomain { x: sx, y: sy });
            }
            refine_to_max(&topo, &mut set, domain, base_cell, (sx, sy))
                .ok_or(SolverError::SeedOutsideDomain { x: sx, y: sy })?;
        }

        topo.regularize(&mut set);
        finalize(domain, base_shape, max_level, base_cell, mask, set, true)
    }

    /// Assemble a grid from an explicit leaf set without rebalancing. The
    /// leaves must tile the domain. Face segments are only available when
    /// the set happens to be regularized; see [`QuadtreeGrid::regularized`].
    pub fn from_leaf_set(
        domain: Rect,
        base_shape: (u32, u32),
        max_level: u8,
        leaves: &[CellId],
    ) -> Result<Self> {
        validate_params(domain, base_shape, max_level)?;
        let base_cell = (domain.width() / base_shape.0 as f64, domain.height() / base_shape.1 as f64);
        let mut set = FxHashSet::default();
        for &id in leaves {
            let (nx, ny) = (
                (base_shape.0 as u64) << (id.level - 1),
                (base_shape.1 as u64) << (id.level - 1),
            );
            if id.level == 0 || id.level > max_level || (id.i as u64) >= nx || (id.j as u64) >= ny {
                return Err(SolverError::InvalidInput(format!("cell {id:?} out of range")));
            }
            if !set.insert(id) {
                return Err(SolverError::InvalidInput(format!("duplicate cell {id:?}")));
            }
        }
        finalize(domain, base_shape, max_level, base_cell, None, set, false)
    }

    /// Rebalanced copy of this grid (refinement only). A fixpoint: already
    /// balanced grids come back unchanged.
    pub fn regularized(&self) -> QuadtreeGrid {
        if self.regular {
            return self.clone();
        }
        let topo = Topo {
            base: self.base_shape,
            max_level: self.max_level,
            active_base: self.active_base.as_ref(),
        };
        let mut set: FxHashSet<CellId> = self.cells.iter().map(|c| c.id).collect();
        topo.regularize(&mut set);
        finalize(
            self.domain,
            self.base_shape,
            self.max_level,
            self.base_cell,
            self.active_base.clone(),
            set,
            true,
        )
        .expect("rebalancing a valid grid cannot break it")
    }

    pub fn domain(&self) -> Rect {
        self.domain
    }

    pub fn base_shape(&self) -> (u32, u32) {
        self.base_shape
    }

    pub fn max_level(&self) -> u8 {
        self.max_level
    }

    /// Size of a level-1 cell.
    pub fn base_cell_size(&self) -> (f64, f64) {
        self.base_cell
    }

    /// Smallest (dx, dy) over the current leaves.
    pub fn min_cell_size(&self) -> (f64, f64) {
        self.min_cell
    }

    /// Total area covered by active leaves.
    pub fn total_area(&self) -> f64 {
        self.total_area
    }

    pub fn leaves(&self) -> &[Cell] {
        &self.cells
    }

    pub fn leaf_count(&self) -> usize {
        self.cells.len()
    }

    pub fn leaf_index(&self, id: CellId) -> Option<usize> {
        self.index.get(&id).map(|&i| i as usize)
    }

    pub fn is_regularized(&self) -> bool {
        self.regular
    }

    pub fn is_masked(&self) -> bool {
        self.active_base.is_some()
    }

    /// Leaf containing the point, if any (masked holes return `None`).
    pub fn find_leaf_at(&self, x: f64, y: f64) -> Option<usize> {
        if !self.domain.contains(x, y) {
            return None;
        }
        let (fnx, fny) = (
            (self.base_shape.0 as u64) << (self.max_level - 1),
            (self.base_shape.1 as u64) << (self.max_level - 1),
        );
        let fdx = self.base_cell.0 / (1u64 << (self.max_level - 1)) as f64;
        let fdy = self.base_cell.1 / (1u64 << (self.max_level - 1)) as f64;
        let fx = (((x - self.domain.x0) / fdx).floor() as i64).clamp(0, fnx as i64 - 1) as u64;
        let fy = (((y - self.domain.y0) / fdy).floor() as i64).clamp(0, fny as i64 - 1) as u64;
        for level in (1..=self.max_level).rev() {
            let s = self.max_level - level;
            let id = CellId::new(level, (fx >> s) as u32, (fy >> s) as u32);
            if let Some(&k) = self.index.get(&id) {
                return Some(k as usize);
            }
        }
        None
    }

    /// Complete, duplicate-free enumeration of face segments. Requires a
    /// regularized grid.
    pub fn segments(&self) -> Result<&[FaceSegment]> {
        self.segs
            .as_ref()
            .map(|s| s.segments.as_slice())
            .ok_or(SolverError::NotRegularized)
    }

    /// Segments adjacent to one leaf, with orientation.
    pub fn cell_segments(&self, leaf: usize) -> &[SegRef] {
        let s = self.segs.as_ref().expect("grid is regularized");
        &s.seg_refs[s.seg_off[leaf] as usize..s.seg_off[leaf + 1] as usize]
    }

    /// Leaf neighbors across one side: empty at a boundary, one for equal or
    /// coarser neighbors, two when the neighbors are finer.
    pub fn leaf_neighbors(&self, leaf: usize, side: Side) -> Vec<usize> {
        let data = self.segs.as_ref().expect("grid is regularized");
        let mut out = Vec::with_capacity(2);
        for r in self.cell_segments(leaf) {
            let seg = &data.segments[r.seg as usize];
            let (axis_match, other) = match side {
                Side::West => (seg.axis == Axis::X && r.outward < 0, seg.minus),
                Side::East => (seg.axis == Axis::X && r.outward > 0, seg.plus),
                Side::South => (seg.axis == Axis::Y && r.outward < 0, seg.minus),
                Side::North => (seg.axis == Axis::Y && r.outward > 0, seg.plus),
            };
            if axis_match {
                if let Some(n) = other.leaf() {
                    out.push(n);
                }
            }
        }
        out
    }

    /// One text line per leaf: `level,cx,cy,dx,dy`.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for c in &self.cells {
            writeln!(
                out,
                "{},{},{},{},{}",
                c.id.level, c.center.0, c.center.1, c.size.0, c.size.1
            )
            .unwrap();
        }
        out
    }

    /// Sorted leaf ids; equal ids mean equal grids (given equal parameters).
    pub fn leaf_ids(&self) -> Vec<CellId> {
        self.cells.iter().map(|c| c.id).collect()
    }
}

fn validate_params(domain: Rect, base_shape: (u32, u32), max_level: u8) -> Result<()> {
    if !(domain.width() > 0.0 && domain.height() > 0.0)
        || !domain.width().is_finite()
        || !domain.height().is_finite()
    {
        return Err(SolverError::InvalidInput("degenerate domain rectangle".into()));
    }
    if base_shape.0 == 0 || base_shape.1 == 0 {
        return Err(SolverError::InvalidInput("base shape must be at least 1x1".into()));
    }
    if max_level == 0 {
        return Err(SolverError::InvalidInput("max_level must be at least 1".into()));
    }
    if max_level > LEVEL_CAP {
        return Err(SolverError::InvalidInput(format!(
            "max_level {max_level} exceeds supported cap {LEVEL_CAP}"
        )));
    }
    let scale = (1u64 << (max_level - 1)) as f64;
    let w = domain.width() / base_shape.0 as f64 / scale;
    let h = domain.height() / base_shape.1 as f64 / scale;
    if !(w.is_normal() && h.is_normal()) {
        return Err(SolverError::InvalidInput(
            "cell width underflows at the requested max_level".into(),
        ));
    }
    Ok(())
}

/// Refine the leaf chain containing `p` until it reaches the maximum level.
/// Returns `None` if no active leaf contains the point.
fn refine_to_max(
    topo: &Topo,
    set: &mut FxHashSet<CellId>,
    domain: Rect,
    base_cell: (f64, f64),
    p: (f64, f64),
) -> Option<()> {
    let m = topo.max_level;
    let (fnx, fny) = topo.cells_on_level(m);
    let fdx = base_cell.0 / (1u64 << (m - 1)) as f64;
    let fdy = base_cell.1 / (1u64 << (m - 1)) as f64;
    let fx = (((p.0 - domain.x0) / fdx).floor() as i64).clamp(0, fnx as i64 - 1) as u64;
    let fy = (((p.1 - domain.y0) / fdy).floor() as i64).clamp(0, fny as i64 - 1) as u64;
    loop {
        let mut found = None;
        for level in (1..=m).rev() {
            let s = m - level;
            let id = CellId::new(level, (fx >> s) as u32, (fy >> s) as u32);
            if set.contains(&id) {
                found = Some(id);
                break;
            }
        }
        let leaf = found?;
        if leaf.level >= m {
            return Some(());
        }
        set.remove(&leaf);
        for ch in leaf.children() {
            set.insert(ch);
        }
    }
}

fn finalize(
    domain: Rect,
    base_shape: (u32, u32),
    max_level: u8,
    base_cell: (f64, f64),
    active_base: Option<FxHashSet<u64>>,
    set: FxHashSet<CellId>,
    known_regular: bool,
) -> Result<QuadtreeGrid> {
    let mut ids: Vec<CellId> = set.iter().copied().collect();
    ids.sort_by_key(|c| c.morton(max_level));

    // Tiling check: sorted Morton ranges must be disjoint and sum to the
    // active area (in finest-grid cells).
    let mut covered: u64 = 0;
    let mut prev_end: Option<(u64, u64)> = None; // (key, end)
    for id in &ids {
        let key = id.morton(max_level);
        let span = id.span(max_level);
        let cells = span * span;
        if let Some((_, end)) = prev_end {
            if key < end {
                return Err(SolverError::BrokenTiling);
            }
        }
        prev_end = Some((key, key + cells));
        covered += cells;
    }
    let per_base = {
        let s = 1u64 << (max_level - 1);
        s * s
    };
    let n_base = match &active_base {
        None => base_shape.0 as u64 * base_shape.1 as u64,
        Some(a) => a.len() as u64,
    };
    if covered != per_base * n_base {
        return Err(SolverError::BrokenTiling);
    }

    let mut cells = Vec::with_capacity(ids.len());
    let mut index = FxHashMap::default();
    let (mut min_dx, mut min_dy) = (f64::INFINITY, f64::INFINITY);
    let mut total_area = 0.0;
    for (k, id) in ids.iter().enumerate() {
        let scale = (1u64 << (id.level - 1)) as f64;
        let dx = base_cell.0 / scale;
        let dy = base_cell.1 / scale;
        let cx = domain.x0 + (id.i as f64 + 0.5) * dx;
        let cy = domain.y0 + (id.j as f64 + 0.5) * dy;
        min_dx = min_dx.min(dx);
        min_dy = min_dy.min(dy);
        total_area += dx * dy;
        cells.push(Cell { id: *id, center: (cx, cy), size: (dx, dy) });
        index.insert(*id, k as u32);
    }

    let topo = Topo { base: base_shape, max_level, active_base: active_base.as_ref() };
    let regular = if known_regular {
        true
    } else {
        ids.iter().all(|&id| !topo.violates_balance(&set, id))
    };

    let segs = regular.then(|| build_segments(&topo, &set, &cells, &index));

    Ok(QuadtreeGrid {
        domain,
        base_shape,
        max_level,
        base_cell,
        cells,
        index,
        active_base,
        regular,
        segs,
        min_cell: (min_dx, min_dy),
        total_area,
    })
}

fn build_segments(
    topo: &Topo,
    set: &FxHashSet<CellId>,
    cells: &[Cell],
    index: &FxHashMap<CellId, u32>,
) -> SegmentData {
    let mut segments = Vec::new();
    let mut counts = vec![0u32; cells.len()];

    for (k, cell) in cells.iter().enumerate() {
        let k = k as u32;
        let (cx, cy) = cell.center;
        let (dx, dy) = cell.size;

        // Interior segments are owned by the leaf on the minus side, so only
        // east/north faces are scanned for them; boundary segments are
        // emitted by the adjacent leaf on whichever side they occur.
        for side in [Side::East, Side::North] {
            let axis = if side == Side::East { Axis::X } else { Axis::Y };
            let face_mid = match side {
                Side::East => (cx + 0.5 * dx, cy),
                Side::North => (cx, cy + 0.5 * dy),
                _ => unreachable!(),
            };
            match topo.across_face(set, cell.id, side) {
                Across::Outside(s) => {
                    segments.push(FaceSegment {
                        axis,
                        minus: SegSide::Leaf(k),
                        plus: SegSide::Exterior(Exterior::Domain(s)),
                        midpoint: face_mid,
                        length: if axis == Axis::X { dy } else { dx },
                    });
                    counts[k as usize] += 1;
                }
                Across::Hole => {
                    segments.push(FaceSegment {
                        axis,
                        minus: SegSide::Leaf(k),
                        plus: SegSide::Exterior(Exterior::Hole),
                        midpoint: face_mid,
                        length: if axis == Axis::X { dy } else { dx },
                    });
                    counts[k as usize] += 1;
                }
                Across::Leaves(ns) => {
                    for nid in ns {
                        let nk = index[&nid];
                        let n = &cells[nk as usize];
                        // The segment spans the finer of the two faces.
                        let (mid, len) = if n.id.level > cell.id.level {
                            match axis {
                                Axis::X => ((cx + 0.5 * dx, n.center.1), n.size.1),
                                Axis::Y => ((n.center.0, cy + 0.5 * dy), n.size.0),
                            }
                        } else {
                            (face_mid, if axis == Axis::X { dy } else { dx })
                        };
                        segments.push(FaceSegment {
                            axis,
                            minus: SegSide::Leaf(k),
                            plus: SegSide::Leaf(nk),
                            midpoint: mid,
                            length: len,
                        });
                        counts[k as usize] += 1;
                        counts[nk as usize] += 1;
                    }
                }
            }
        }

        for side in [Side::West, Side::South] {
            let axis = if side == Side::West { Axis::X } else { Axis::Y };
            let face_mid = match side {
                Side::West => (cx - 0.5 * dx, cy),
                Side::South => (cx, cy - 0.5 * dy),
                _ => unreachable!(),
            };
            let ext = match topo.across_face(set, cell.id, side) {
                Across::Outside(s) => Some(Exterior::Domain(s)),
                Across::Hole => Some(Exterior::Hole),
                Across::Leaves(_) => None,
            };
            if let Some(e) = ext {
                segments.push(FaceSegment {
                    axis,
                    minus: SegSide::Exterior(e),
                    plus: SegSide::Leaf(k),
                    midpoint: face_mid,
                    length: if axis == Axis::X { dy } else { dx },
                });
                counts[k as usize] += 1;
            }
        }
    }

    let mut seg_off = vec![0u32; cells.len() + 1];
    for k in 0..cells.len() {
        seg_off[k + 1] = seg_off[k] + counts[k];
    }
    let mut cursor = seg_off.clone();
    let mut seg_refs = vec![SegRef { seg: 0, outward: 0 }; seg_off[cells.len()] as usize];
    for (si, seg) in segments.iter().enumerate() {
        if let SegSide::Leaf(k) = seg.minus {
            seg_refs[cursor[k as usize] as usize] = SegRef { seg: si as u32, outward: 1 };
            cursor[k as usize] += 1;
        }
        if let SegSide::Leaf(k) = seg.plus {
            seg_refs[cursor[k as usize] as usize] = SegRef { seg: si as u32, outward: -1 };
            cursor[k as usize] += 1;
        }
    }
    debug_assert_eq!(cursor[..cells.len()], seg_off[1..]);

    SegmentData { segments, seg_off, seg_refs }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit() -> Rect {
        Rect::new(0.0, 0.0, 1.0, 1.0)
    }

    #[test]
    fn no_seeds_keeps_base_grid() {
        let g = QuadtreeGrid::build(unit(), (2, 2), 3, &[]).unwrap();
        assert_eq!(g.leaf_count(), 4);
        assert!(g.leaves().iter().all(|c| c.id.level == 1));
        assert!(g.is_regularized());
    }

    #[test]
    fn single_seed_single_root_refines_once() {
        let g = QuadtreeGrid::build(unit(), (1, 1), 2, &[(0.1, 0.1)]).unwrap();
        assert_eq!(g.leaf_count(), 4);
        assert!(g.leaves().iter().all(|c| c.id.level == 2));
    }

    #[test]
    fn seed_outside_domain_is_rejected() {
        let err = QuadtreeGrid::build(unit(), (1, 1), 2, &[(1.5, 0.5)]).unwrap_err();
        assert!(matches!(err, SolverError::SeedOutsideDomain { .. }));
    }

    #[test]
    fn underflow_level_is_rejected() {
        let err = QuadtreeGrid::build(unit(), (1, 1), 200, &[]).unwrap_err();
        assert!(matches!(err, SolverError::InvalidInput(_)));
    }

    #[test]
    fn deep_seed_produces_balanced_onion() {
        let g = QuadtreeGrid::build(unit(), (1, 1), 5, &[(0.01, 0.01)]).unwrap();
        assert!(g.is_regularized());
        // The seeded corner must be at the maximum level.
        let k = g.find_leaf_at(0.01, 0.01).unwrap();
        assert_eq!(g.leaves()[k].id.level, 5);
        check_balance_exhaustive(&g);
    }

    #[test]
    fn diagonal_imbalance_forces_refinement() {
        // Root split to level 2 everywhere, then the SW quadrant's NE child
        // refined twice more: the NE level-2 quadrant ends up touching a
        // level-4 leaf at the center corner and must split.
        let g = QuadtreeGrid::build(unit(), (1, 1), 4, &[(0.49, 0.49)]).unwrap();
        assert!(g.is_regularized());
        check_balance_exhaustive(&g);
        let k = g.find_leaf_at(0.51, 0.51).unwrap();
        assert!(g.leaves()[k].id.level >= 3, "diagonal neighbor must have refined");
    }

    #[test]
    fn regularized_is_fixpoint_on_balanced_grid() {
        let g = QuadtreeGrid::build(unit(), (2, 2), 4, &[(0.1, 0.9)]).unwrap();
        let h = g.regularized();
        assert_eq!(g.leaf_ids(), h.leaf_ids());
    }

    #[test]
    fn explicit_unbalanced_set_gets_balanced() {
        // One root; children (level 2); the SW child refined to level 3, and
        // its own NE child refined to level 4. The NE level-2 quadrant then
        // touches level 4 diagonally: difference 2, not regularized.
        let l2 = CellId::new(1, 0, 0).children();
        let l3 = l2[0].children();
        let l4 = l3[3].children();
        let mut leaves = vec![l2[1], l2[2], l2[3]];
        leaves.extend_from_slice(&l3[..3]);
        leaves.extend_from_slice(&l4);
        let g = QuadtreeGrid::from_leaf_set(unit(), (1, 1), 4, &leaves).unwrap();
        assert!(!g.is_regularized());
        assert!(g.segments().is_err());
        let h = g.regularized();
        assert!(h.is_regularized());
        check_balance_exhaustive(&h);
        // The level-2 quadrants adjacent to the level-4 block must now be 3.
        let k = h.find_leaf_at(0.51, 0.51).unwrap();
        assert_eq!(h.leaves()[k].id.level, 3);
    }

    #[test]
    fn uniform_2x2_segment_counts() {
        let g = QuadtreeGrid::build(unit(), (2, 2), 1, &[]).unwrap();
        let segs = g.segments().unwrap();
        let interior = segs.iter().filter(|s| !s.is_boundary()).count();
        let boundary = segs.iter().filter(|s| s.is_boundary()).count();
        assert_eq!(interior, 4);
        assert_eq!(boundary, 8);
    }

    #[test]
    fn single_cell_segments() {
        let g = QuadtreeGrid::build(unit(), (1, 1), 1, &[]).unwrap();
        let segs = g.segments().unwrap();
        assert_eq!(segs.iter().filter(|s| !s.is_boundary()).count(), 0);
        assert_eq!(segs.iter().filter(|s| s.is_boundary()).count(), 4);
    }

    /// Coarse cell with a split west face: two half-length segments, each
    /// matching the finer neighbor's face.
    #[test]
    fn split_face_yields_two_segments() {
        let d = Rect::new(0.0, 0.0, 2.0, 1.0);
        let g = QuadtreeGrid::build(d, (2, 1), 2, &[(0.25, 0.25)]).unwrap();
        // Left base cell refined to level 2, right base cell stays level 1.
        let right = g.find_leaf_at(1.5, 0.5).unwrap();
        assert_eq!(g.leaves()[right].id.level, 1);
        let west = g.leaf_neighbors(right, Side::West);
        assert_eq!(west.len(), 2);
        let mut lens: Vec<f64> = g
            .segments()
            .unwrap()
            .iter()
            .filter(|s| s.axis == Axis::X && s.plus == SegSide::Leaf(right as u32) && !s.is_boundary())
            .map(|s| s.length)
            .collect();
        lens.sort_by(f64::total_cmp);
        assert_eq!(lens, vec![0.5, 0.5]);
        // Segment lengths over every leaf face sum to the full face length.
        check_face_length_sums(&g);
    }

    #[test]
    fn neighbors_on_uniform_grid() {
        let g = QuadtreeGrid::build(unit(), (3, 3), 1, &[]).unwrap();
        let c = g.find_leaf_at(0.5, 0.5).unwrap();
        for side in Side::ALL {
            assert_eq!(g.leaf_neighbors(c, side).len(), 1);
        }
        let sw = g.find_leaf_at(0.1, 0.1).unwrap();
        assert!(g.leaf_neighbors(sw, Side::West).is_empty());
        assert!(g.leaf_neighbors(sw, Side::South).is_empty());
    }

    #[test]
    fn tiling_area_is_exact() {
        let d = Rect::new(-2.0, 0.0, 2.0, 1.0);
        let g = QuadtreeGrid::build(d, (16, 4), 4, &[(0.07, 0.51), (-1.3, 0.2)]).unwrap();
        let sum: f64 = g.leaves().iter().map(|c| c.area()).sum();
        assert!((sum - 4.0).abs() <= 1e-14 * 4.0);
        assert!((g.total_area() - 4.0).abs() <= 1e-14 * 4.0);
    }

    #[test]
    fn deterministic_rebuild() {
        let seeds = [(0.3, 0.3), (0.31, 0.32), (0.9, 0.1), (0.5, 0.77)];
        let a = QuadtreeGrid::build(unit(), (2, 2), 6, &seeds).unwrap();
        let b = QuadtreeGrid::build(unit(), (2, 2), 6, &seeds).unwrap();
        assert_eq!(a.leaf_ids(), b.leaf_ids());
        assert_eq!(a.dump(), b.dump());
    }

    #[test]
    fn masked_channel_has_hole_walls() {
        // Right half of a 4x2 base grid keeps only the top row: the bottom
        // right cells become holes with wall segments around them.
        let d = Rect::new(0.0, 0.0, 4.0, 2.0);
        let g = QuadtreeGrid::build_masked(d, (4, 2), 2, &[], |c, _| !(c.0 > 2.0 && c.1 < 1.0))
            .unwrap();
        assert_eq!(g.leaf_count(), 6);
        assert!(g.is_masked());
        let holes = g
            .segments()
            .unwrap()
            .iter()
            .filter(|s| {
                matches!(s.minus, SegSide::Exterior(Exterior::Hole))
                    || matches!(s.plus, SegSide::Exterior(Exterior::Hole))
            })
            .count();
        // The masked 2x1 block exposes 1 west face + 2 north faces.
        assert_eq!(holes, 3);
        assert!(g.find_leaf_at(3.0, 0.5).is_none());
    }

    #[test]
    fn random_builds_stay_balanced_and_tiled() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for trial in 0..20 {
            let nx = rng.gen_range(1..4u32);
            let ny = rng.gen_range(1..4u32);
            let m = rng.gen_range(1..6u8);
            let n_seeds = rng.gen_range(0..8);
            let seeds: Vec<(f64, f64)> =
                (0..n_seeds).map(|_| (rng.gen::<f64>(), rng.gen::<f64>())).collect();
            let g = QuadtreeGrid::build(unit(), (nx, ny), m, &seeds)
                .unwrap_or_else(|e| panic!("trial {trial}: {e}"));
            check_balance_exhaustive(&g);
            check_face_length_sums(&g);
            let sum: f64 = g.leaves().iter().map(|c| c.area()).sum();
            assert!((sum - 1.0).abs() <= 1e-14);
            for &(sx, sy) in &seeds {
                let k = g.find_leaf_at(sx, sy).unwrap();
                assert_eq!(g.leaves()[k].id.level, m, "seeded leaf must reach max level");
            }
        }
    }

    /// Brute-force pairwise balance check: any two leaves whose closed
    /// rectangles touch must differ by at most one level.
    fn check_balance_exhaustive(g: &QuadtreeGrid) {
        let cells = g.leaves();
        for a in cells {
            for b in cells {
                let (ax0, ax1) = (a.center.0 - 0.5 * a.size.0, a.center.0 + 0.5 * a.size.0);
                let (ay0, ay1) = (a.center.1 - 0.5 * a.size.1, a.center.1 + 0.5 * a.size.1);
                let (bx0, bx1) = (b.center.0 - 0.5 * b.size.0, b.center.0 + 0.5 * b.size.0);
                let (by0, by1) = (b.center.1 - 0.5 * b.size.1, b.center.1 + 0.5 * b.size.1);
                let eps = 1e-12;
                let touch = ax0 <= bx1 + eps && bx0 <= ax1 + eps && ay0 <= by1 + eps && by0 <= ay1 + eps;
                if touch {
                    assert!(
                        (a.id.level as i32 - b.id.level as i32).abs() <= 1,
                        "balance violated between {:?} and {:?}",
                        a.id,
                        b.id
                    );
                }
            }
        }
    }

    /// For every leaf and side, the adjacent segment lengths must sum to the
    /// full face length.
    fn check_face_length_sums(g: &QuadtreeGrid) {
        let segs = g.segments().unwrap();
        for (k, cell) in g.leaves().iter().enumerate() {
            for side in Side::ALL {
                let mut sum = 0.0;
                for r in g.cell_segments(k) {
                    let s = &segs[r.seg as usize];
                    let on_side = match side {
                        Side::West => s.axis == Axis::X && r.outward < 0,
                        Side::East => s.axis == Axis::X && r.outward > 0,
                        Side::South => s.axis == Axis::Y && r.outward < 0,
                        Side::North => s.axis == Axis::Y && r.outward > 0,
                    };
                    if on_side {
                        sum += s.length;
                    }
                }
                let full = match side {
                    Side::West | Side::East => cell.size.1,
                    Side::South | Side::North => cell.size.0,
                };
                assert!(
                    (sum - full).abs() <= 1e-12 * full,
                    "face segments of {:?} {side:?} sum to {sum}, expected {full}",
                    cell.id
                );
            }
        }
    }
}
