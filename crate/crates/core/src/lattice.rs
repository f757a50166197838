//! Pixel lattice, clear-pixel adjacency and the overlapping patch layout.
//!
//! Clear pixels are numbered in row-major order over the cells of the grid
//! (or of a rectangular region of it). Cloudy cells carry no pixel index and
//! take part in no neighbor relation.

use std::ops::Range;

use crate::error::{Error, Result};

/// Default block height at 4.4 km resolution.
pub const DEFAULT_ROWS: usize = 32;
/// Default block width at 4.4 km resolution.
pub const DEFAULT_COLS: usize = 128;

/// A rectangular pixel grid with a clear/cloud mask.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockGrid {
    rows: usize,
    cols: usize,
    resolution_km: f64,
    clear_mask: Vec<bool>,
}

impl BlockGrid {
    pub fn new(rows: usize, cols: usize, resolution_km: f64, clear_mask: Vec<bool>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::config(format!("grid must be nonempty, got {rows}x{cols}")));
        }
        if !(resolution_km.is_finite() && resolution_km > 0.0) {
            return Err(Error::config(format!("resolution_km must be positive, got {resolution_km}")));
        }
        if clear_mask.len() != rows * cols {
            return Err(Error::config(format!(
                "clear mask has {} cells, expected {}",
                clear_mask.len(),
                rows * cols
            )));
        }
        Ok(Self {
            rows,
            cols,
            resolution_km,
            clear_mask,
        })
    }

    /// A grid with every cell clear.
    pub fn all_clear(rows: usize, cols: usize, resolution_km: f64) -> Result<Self> {
        Self::new(rows, cols, resolution_km, vec![true; rows * cols])
    }

    /// The default 32 x 128 block at 4.4 km.
    pub fn default_block() -> Self {
        Self::all_clear(DEFAULT_ROWS, DEFAULT_COLS, 4.4).expect("default grid is valid")
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn resolution_km(&self) -> f64 {
        self.resolution_km
    }

    pub fn n_cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn clear_mask(&self) -> &[bool] {
        &self.clear_mask
    }

    #[inline]
    pub fn cell(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    #[inline]
    pub fn is_clear(&self, row: usize, col: usize) -> bool {
        self.clear_mask[self.cell(row, col)]
    }

    pub fn n_clear(&self) -> usize {
        self.clear_mask.iter().filter(|&&c| c).count()
    }

    /// Marks the cells of `rows x cols` as cloudy.
    pub fn mask_rect(&mut self, rows: Range<usize>, cols: Range<usize>) {
        for r in rows.start..rows.end.min(self.rows) {
            for c in cols.start..cols.end.min(self.cols) {
                let i = self.cell(r, c);
                self.clear_mask[i] = false;
            }
        }
    }
}

const NO_PIXEL: usize = usize::MAX;

/// First-order (rook) adjacency among the clear pixels of a grid region.
///
/// Neighbor lists are stored in compressed rows; neighbors of each pixel are
/// sorted by pixel index.
#[derive(Debug, Clone, PartialEq)]
pub struct Adjacency {
    grid_rows: usize,
    grid_cols: usize,
    /// Grid cell of each pixel.
    cells: Vec<usize>,
    /// Pixel index of each grid cell, `NO_PIXEL` outside the region or when cloudy.
    cell_to_pixel: Vec<usize>,
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
}

/// Adjacency over all clear pixels of the grid.
pub fn build_adjacency(grid: &BlockGrid) -> Adjacency {
    build_region_adjacency(grid, 0..grid.rows, 0..grid.cols)
}

/// Adjacency over the clear pixels inside a rectangular region; neighbors
/// outside the region are dropped.
pub fn build_region_adjacency(grid: &BlockGrid, rows: Range<usize>, cols: Range<usize>) -> Adjacency {
    let rows = rows.start.min(grid.rows)..rows.end.min(grid.rows);
    let cols = cols.start.min(grid.cols)..cols.end.min(grid.cols);
    let mut cells = Vec::new();
    let mut cell_to_pixel = vec![NO_PIXEL; grid.n_cells()];
    for r in rows.clone() {
        for c in cols.clone() {
            let cell = grid.cell(r, c);
            if grid.clear_mask[cell] {
                cell_to_pixel[cell] = cells.len();
                cells.push(cell);
            }
        }
    }

    let mut offsets = Vec::with_capacity(cells.len() + 1);
    let mut neighbors = Vec::with_capacity(cells.len() * 4);
    offsets.push(0);
    for &cell in &cells {
        let (r, c) = (cell / grid.cols, cell % grid.cols);
        let mut local = [NO_PIXEL; 4];
        let mut k = 0;
        // Row-major cell order: up, left, right, down gives sorted pixel ids.
        let candidates = [
            (r > rows.start).then(|| cell - grid.cols),
            (c > cols.start).then(|| cell - 1),
            (c + 1 < cols.end).then(|| cell + 1),
            (r + 1 < rows.end).then(|| cell + grid.cols),
        ];
        for nb in candidates.into_iter().flatten() {
            let q = cell_to_pixel[nb];
            if q != NO_PIXEL {
                local[k] = q;
                k += 1;
            }
        }
        neighbors.extend_from_slice(&local[..k]);
        offsets.push(neighbors.len());
    }

    Adjacency {
        grid_rows: grid.rows,
        grid_cols: grid.cols,
        cells,
        cell_to_pixel,
        offsets,
        neighbors,
    }
}

impl Adjacency {
    pub fn n_pixels(&self) -> usize {
        self.cells.len()
    }

    #[inline]
    pub fn neighbors(&self, p: usize) -> &[usize] {
        &self.neighbors[self.offsets[p]..self.offsets[p + 1]]
    }

    /// Number of clear neighbors, `n_p`.
    #[inline]
    pub fn degree(&self, p: usize) -> usize {
        self.offsets[p + 1] - self.offsets[p]
    }

    /// Grid cell index of pixel `p`.
    pub fn cell(&self, p: usize) -> usize {
        self.cells[p]
    }

    /// (row, col) of pixel `p` in the full grid.
    pub fn position(&self, p: usize) -> (usize, usize) {
        (self.cells[p] / self.grid_cols, self.cells[p] % self.grid_cols)
    }

    pub fn pixel_of_cell(&self, cell: usize) -> Option<usize> {
        match self.cell_to_pixel.get(cell) {
            Some(&p) if p != NO_PIXEL => Some(p),
            _ => None,
        }
    }

    pub fn grid_shape(&self) -> (usize, usize) {
        (self.grid_rows, self.grid_cols)
    }

    /// Unordered neighbor pairs `(p, q)` with `p < q`, each listed once.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.n_pixels()).flat_map(move |p| {
            self.neighbors(p)
                .iter()
                .copied()
                .filter(move |&q| q > p)
                .map(move |q| (p, q))
        })
    }

    pub fn n_edges(&self) -> usize {
        self.neighbors.len() / 2
    }

    /// Pixel visiting order of the sampler sweep: column by column from the
    /// left, top to bottom within each column.
    pub fn column_major_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.n_pixels()).collect();
        order.sort_by_key(|&p| {
            let (r, c) = self.position(p);
            (c, r)
        });
        order
    }

    /// Connected-component label of each pixel and the number of components.
    pub fn components(&self) -> (Vec<usize>, usize) {
        let n = self.n_pixels();
        let mut label = vec![NO_PIXEL; n];
        let mut count = 0;
        let mut stack = Vec::new();
        for start in 0..n {
            if label[start] != NO_PIXEL {
                continue;
            }
            label[start] = count;
            stack.push(start);
            while let Some(p) = stack.pop() {
                for &q in self.neighbors(p) {
                    if label[q] == NO_PIXEL {
                        label[q] = count;
                        stack.push(q);
                    }
                }
            }
            count += 1;
        }
        (label, count)
    }
}

/// Shape of a patch decomposition: a `grid_rows x grid_cols` arrangement of
/// `height x width` patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchSpec {
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub height: usize,
    pub width: usize,
    pub min_overlap: usize,
}

impl Default for PatchSpec {
    /// 2 x 8 patches of 20 x 20 pixels overlapping by at least 4.
    fn default() -> Self {
        Self {
            grid_rows: 2,
            grid_cols: 8,
            height: 20,
            width: 20,
            min_overlap: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Patch {
    pub rows: Range<usize>,
    pub cols: Range<usize>,
}

impl Patch {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        self.rows.contains(&row) && self.cols.contains(&col)
    }
}

/// Overlapping patches covering a block, indexed row-major over the patch grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchLayout {
    spec: PatchSpec,
    block_rows: usize,
    block_cols: usize,
    row_offsets: Vec<usize>,
    col_offsets: Vec<usize>,
    patches: Vec<Patch>,
    owners: Vec<Vec<usize>>,
}

/// Start offsets of `count` windows of `size` covering `0..length`, with the
/// total overlap spread over the gaps as evenly as possible; when it does not
/// divide evenly the leftmost gaps get one extra unit.
fn axis_offsets(length: usize, count: usize, size: usize, min_overlap: usize, axis: &str) -> Result<Vec<usize>> {
    if count == 0 || size == 0 {
        return Err(Error::config(format!("{axis}: patch count and size must be positive")));
    }
    if size > length {
        return Err(Error::config(format!(
            "{axis}: patch size {size} exceeds block size {length}"
        )));
    }
    if count == 1 {
        if size != length {
            return Err(Error::config(format!(
                "{axis}: a single patch of {size} cannot cover {length}"
            )));
        }
        return Ok(vec![0]);
    }
    let total = count * size;
    if total < length {
        return Err(Error::config(format!(
            "{axis}: {count} patches of {size} cannot cover {length}"
        )));
    }
    let overlap = total - length;
    let gaps = count - 1;
    let base = overlap / gaps;
    let extra = overlap % gaps;
    if base < min_overlap {
        return Err(Error::config(format!(
            "{axis}: {count} patches of {size} over {length} overlap by at most {base}, need {min_overlap}"
        )));
    }
    if base + usize::from(extra > 0) >= size {
        return Err(Error::config(format!(
            "{axis}: overlap {} leaves no distinct pixels in a patch of {size}",
            base + usize::from(extra > 0)
        )));
    }
    let mut offsets = Vec::with_capacity(count);
    let mut at = 0;
    offsets.push(0);
    for g in 0..gaps {
        let gap_overlap = base + usize::from(g < extra);
        at += size - gap_overlap;
        offsets.push(at);
    }
    debug_assert_eq!(at + size, length);
    Ok(offsets)
}

/// Lays out `spec` over the block.
pub fn build_patch_layout(grid: &BlockGrid, spec: PatchSpec) -> Result<PatchLayout> {
    let row_offsets = axis_offsets(grid.rows, spec.grid_rows, spec.height, spec.min_overlap, "rows")?;
    let col_offsets = axis_offsets(grid.cols, spec.grid_cols, spec.width, spec.min_overlap, "cols")?;
    let mut patches = Vec::with_capacity(row_offsets.len() * col_offsets.len());
    for &r0 in &row_offsets {
        for &c0 in &col_offsets {
            patches.push(Patch {
                rows: r0..r0 + spec.height,
                cols: c0..c0 + spec.width,
            });
        }
    }
    let mut owners = vec![Vec::new(); grid.n_cells()];
    for (k, patch) in patches.iter().enumerate() {
        for r in patch.rows.clone() {
            for c in patch.cols.clone() {
                owners[grid.cell(r, c)].push(k);
            }
        }
    }
    Ok(PatchLayout {
        spec,
        block_rows: grid.rows,
        block_cols: grid.cols,
        row_offsets,
        col_offsets,
        patches,
        owners,
    })
}

impl PatchLayout {
    /// A layout with one patch spanning the whole block.
    pub fn single(grid: &BlockGrid) -> Self {
        build_patch_layout(
            grid,
            PatchSpec {
                grid_rows: 1,
                grid_cols: 1,
                height: grid.rows,
                width: grid.cols,
                min_overlap: 0,
            },
        )
        .expect("single patch layout is always feasible")
    }

    pub fn spec(&self) -> PatchSpec {
        self.spec
    }

    pub fn patches(&self) -> &[Patch] {
        &self.patches
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn col_offsets(&self) -> &[usize] {
        &self.col_offsets
    }

    pub fn block_shape(&self) -> (usize, usize) {
        (self.block_rows, self.block_cols)
    }

    /// Patches containing a grid cell, in patch index order.
    pub fn owners(&self, cell: usize) -> &[usize] {
        &self.owners[cell]
    }

    /// The patch in which a cell lies deepest, measured to that patch's edges
    /// inside the block; ties go to the lowest index.
    pub fn interior_owner(&self, row: usize, col: usize) -> usize {
        let depth = |p: &Patch| {
            let mut d = usize::MAX;
            if p.rows.start > 0 {
                d = d.min(row - p.rows.start);
            }
            if p.rows.end < self.block_rows {
                d = d.min(p.rows.end - 1 - row);
            }
            if p.cols.start > 0 {
                d = d.min(col - p.cols.start);
            }
            if p.cols.end < self.block_cols {
                d = d.min(p.cols.end - 1 - col);
            }
            d
        };
        let cell = row * self.block_cols + col;
        let mut best = self.owners[cell][0];
        for &k in &self.owners[cell][1..] {
            if depth(&self.patches[k]) > depth(&self.patches[best]) {
                best = k;
            }
        }
        best
    }

    /// Distance in pixels from a cell to the nearest patch edge lying inside
    /// the block (block borders do not count). `None` for a single patch.
    pub fn distance_to_patch_edge(&self, row: usize, col: usize) -> Option<usize> {
        let mut best: Option<usize> = None;
        let mut consider = |d: usize| best = Some(best.map_or(d, |b: usize| b.min(d)));
        for p in &self.patches {
            if p.rows.start > 0 {
                consider(row.abs_diff(p.rows.start));
            }
            if p.rows.end < self.block_rows {
                consider(row.abs_diff(p.rows.end - 1));
            }
            if p.cols.start > 0 {
                consider(col.abs_diff(p.cols.start));
            }
            if p.cols.end < self.block_cols {
                consider(col.abs_diff(p.cols.end - 1));
            }
        }
        best
    }
}
