//! MovingAI-format grid maps, benchmark scenarios, and the graph view the
//! planners operate on.
//!
//! A `.map` file looks like
//!
//! ```text
//! type octile
//! height 2
//! width 3
//! map
//! .@.
//! ...
//! ```
//!
//! where `.` and `G` are passable and `@`, `T`, `O` are blocked. Passable
//! cells are numbered row-major into dense [`Vertex`] ids, so the graph, the
//! heuristics and the planners never deal with coordinates directly.

use std::fmt;

use thiserror::Error;

/// Dense id of a passable cell (row-major over the map) or, for graphs built
/// with [`GridGraph::from_lists`], an arbitrary node id.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Vertex(pub u32);

impl Vertex {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Debug for Vertex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "v{}", self.0)
    }
}

#[derive(Debug, Error)]
pub enum MapError {
    #[error("line {line}: expected `{expected}` header")]
    MissingHeader { line: usize, expected: &'static str },
    #[error("line {line}: cannot parse `{field}` value")]
    BadDimension { line: usize, field: &'static str },
    #[error("map declares {expected} rows but line {line} is row {got}")]
    ExtraRow { line: usize, expected: u32, got: u32 },
    #[error("line {line}: row has {got} cells, expected {expected}")]
    RowWidth { line: usize, expected: u32, got: u32 },
    #[error("map declares {expected} rows but only {got} were given")]
    MissingRows { expected: u32, got: u32 },
    #[error("line {line}, column {column}: unknown tile `{tile}`")]
    UnknownTile { line: usize, column: usize, tile: char },
    #[error("map has zero width or height")]
    EmptyMap,
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("line {line}: expected {expected} tab-separated fields, found {got}")]
    FieldCount { line: usize, expected: usize, got: usize },
    #[error("line {line}: cannot parse field `{field}`")]
    BadField { line: usize, field: &'static str },
    #[error("line {line}: {which} ({x}, {y}) is outside the map")]
    OutOfBounds { line: usize, which: &'static str, x: u32, y: u32 },
    #[error("line {line}: {which} ({x}, {y}) is a blocked cell")]
    BlockedCell { line: usize, which: &'static str, x: u32, y: u32 },
}

/// A parsed map: dimensions plus per-cell passability.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GridMap {
    width: u32,
    height: u32,
    passable: Vec<bool>,
}

impl GridMap {
    /// Parses MovingAI `.map` text. Errors name the offending 1-based line.
    pub fn parse(text: &str) -> Result<Self, MapError> {
        let mut lines = text.lines().enumerate();

        let mut expect = |field: &'static str| -> Result<(usize, &str), MapError> {
            for (i, raw) in lines.by_ref() {
                let line = raw.trim();
                if line.is_empty() {
                    continue;
                }
                return Ok((i + 1, line));
            }
            Err(MapError::MissingHeader { line: 0, expected: field })
        };

        let (line, l) = expect("type")?;
        if !l.starts_with("type") {
            return Err(MapError::MissingHeader { line, expected: "type" });
        }

        let mut height = None;
        let mut width = None;
        for _ in 0..2 {
            let (line, l) = expect("height/width")?;
            if let Some(v) = l.strip_prefix("height") {
                height = Some(v.trim().parse::<u32>().map_err(|_| MapError::BadDimension {
                    line,
                    field: "height",
                })?);
            } else if let Some(v) = l.strip_prefix("width") {
                width = Some(v.trim().parse::<u32>().map_err(|_| MapError::BadDimension {
                    line,
                    field: "width",
                })?);
            } else {
                return Err(MapError::MissingHeader { line, expected: "height/width" });
            }
        }
        let (height, width) = (height.unwrap(), width.unwrap());
        if height == 0 || width == 0 {
            return Err(MapError::EmptyMap);
        }

        let (line, l) = expect("map")?;
        if l != "map" {
            return Err(MapError::MissingHeader { line, expected: "map" });
        }

        let mut passable = Vec::with_capacity((width * height) as usize);
        let mut rows = 0u32;
        for (i, raw) in lines {
            let line = i + 1;
            let row = raw.trim_end();
            if row.is_empty() {
                continue;
            }
            if rows == height {
                return Err(MapError::ExtraRow { line, expected: height, got: rows + 1 });
            }
            let got = row.chars().count() as u32;
            if got != width {
                return Err(MapError::RowWidth { line, expected: width, got });
            }
            for (c, tile) in row.chars().enumerate() {
                match tile {
                    '.' | 'G' => passable.push(true),
                    '@' | 'T' | 'O' => passable.push(false),
                    _ => {
                        return Err(MapError::UnknownTile { line, column: c + 1, tile })
                    }
                }
            }
            rows += 1;
        }
        if rows != height {
            return Err(MapError::MissingRows { expected: height, got: rows });
        }

        Ok(GridMap { width, height, passable })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    /// Passability of cell (x, y); `false` outside the map.
    pub fn passable(&self, x: u32, y: u32) -> bool {
        x < self.width && y < self.height && self.passable[(y * self.width + x) as usize]
    }

    pub fn passable_count(&self) -> usize {
        self.passable.iter().filter(|&&p| p).count()
    }

    /// Re-emits the map in canonical `.`/`@` form.
    pub fn to_map_string(&self) -> String {
        let mut out = format!("type octile\nheight {}\nwidth {}\nmap\n", self.height, self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                out.push(if self.passable(x, y) { '.' } else { '@' });
            }
            out.push('\n');
        }
        out
    }
}

/// One benchmark scenario line with its endpoints resolved to vertex ids.
#[derive(Clone, Debug)]
pub struct ScenarioEntry {
    pub bucket: u32,
    pub map_name: String,
    pub start: Vertex,
    pub goal: Vertex,
    /// Optimal length as recorded in the file (not recomputed).
    pub optimal_length: f64,
}

/// Parses MovingAI `.scen` text against an already-built graph. The optional
/// `version` header and blank lines are skipped; every other line is an entry
/// and agent ids follow file order.
pub fn parse_scenario(text: &str, graph: &GridGraph) -> Result<Vec<ScenarioEntry>, ScenarioError> {
    let mut entries = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let l = raw.trim();
        if l.is_empty() || l.starts_with("version") {
            continue;
        }
        let fields: Vec<&str> = l.split('\t').collect();
        if fields.len() != 9 {
            return Err(ScenarioError::FieldCount { line, expected: 9, got: fields.len() });
        }
        let num = |idx: usize, field: &'static str| -> Result<u32, ScenarioError> {
            fields[idx].parse().map_err(|_| ScenarioError::BadField { line, field })
        };
        let bucket = num(0, "bucket")?;
        let (sx, sy) = (num(4, "start-x")?, num(5, "start-y")?);
        let (gx, gy) = (num(6, "goal-x")?, num(7, "goal-y")?);
        let optimal_length: f64 = fields[8]
            .parse()
            .map_err(|_| ScenarioError::BadField { line, field: "optimal-length" })?;

        let resolve = |x: u32, y: u32, which: &'static str| -> Result<Vertex, ScenarioError> {
            let map = graph.grid().ok_or(ScenarioError::OutOfBounds { line, which, x, y })?;
            if x >= map.width() || y >= map.height() {
                return Err(ScenarioError::OutOfBounds { line, which, x, y });
            }
            graph.vertex_at(x, y).ok_or(ScenarioError::BlockedCell { line, which, x, y })
        };
        entries.push(ScenarioEntry {
            bucket,
            map_name: fields[1].to_string(),
            start: resolve(sx, sy, "start")?,
            goal: resolve(gx, gy, "goal")?,
            optimal_length,
        });
    }
    Ok(entries)
}

/// Undirected graph over passable cells (4-connected for grid-built graphs),
/// stored compactly with a CSR adjacency. Waiting is an action, not an edge:
/// a vertex never lists itself as a neighbor.
#[derive(Clone, Debug)]
pub struct GridGraph {
    offsets: Vec<u32>,
    adjacency: Vec<Vertex>,
    component: Vec<u32>,
    grid: Option<GridSide>,
}

#[derive(Clone, Debug)]
struct GridSide {
    map: GridMap,
    cell_to_vertex: Vec<u32>,
    vertex_to_cell: Vec<u32>,
}

const NO_VERTEX: u32 = u32::MAX;

impl GridGraph {
    /// Builds the 4-connected graph over the passable cells of `map`.
    pub fn build(map: &GridMap) -> Self {
        let (w, h) = (map.width(), map.height());
        let mut cell_to_vertex = vec![NO_VERTEX; (w * h) as usize];
        let mut vertex_to_cell = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if map.passable(x, y) {
                    cell_to_vertex[(y * w + x) as usize] = vertex_to_cell.len() as u32;
                    vertex_to_cell.push(y * w + x);
                }
            }
        }

        let n = vertex_to_cell.len();
        let mut offsets = Vec::with_capacity(n + 1);
        let mut adjacency = Vec::new();
        offsets.push(0);
        for &cell in &vertex_to_cell {
            let (x, y) = (cell % w, cell / w);
            // Probe in row-major order so adjacency lists come out sorted.
            let mut push = |px: u32, py: u32| {
                if map.passable(px, py) {
                    adjacency.push(Vertex(cell_to_vertex[(py * w + px) as usize]));
                }
            };
            if y > 0 {
                push(x, y - 1);
            }
            if x > 0 {
                push(x - 1, y);
            }
            if x + 1 < w {
                push(x + 1, y);
            }
            if y + 1 < h {
                push(x, y + 1);
            }
            offsets.push(adjacency.len() as u32);
        }

        let mut graph = GridGraph {
            offsets,
            adjacency,
            component: Vec::new(),
            grid: Some(GridSide { map: map.clone(), cell_to_vertex, vertex_to_cell }),
        };
        graph.component = graph.label_components();
        graph
    }

    /// Builds a graph from explicit adjacency lists, mainly so tests can
    /// inject non-grid topologies. Lists are sorted and deduplicated; self
    /// loops are dropped.
    pub fn from_lists(lists: Vec<Vec<u32>>) -> Self {
        let mut offsets = Vec::with_capacity(lists.len() + 1);
        let mut adjacency = Vec::new();
        offsets.push(0);
        for (v, mut list) in lists.into_iter().enumerate() {
            list.sort_unstable();
            list.dedup();
            for u in list {
                if u as usize != v {
                    adjacency.push(Vertex(u));
                }
            }
            offsets.push(adjacency.len() as u32);
        }
        let mut graph = GridGraph { offsets, adjacency, component: Vec::new(), grid: None };
        graph.component = graph.label_components();
        graph
    }

    fn label_components(&self) -> Vec<u32> {
        let n = self.num_vertices();
        let mut component = vec![NO_VERTEX; n];
        let mut next = 0;
        let mut queue = std::collections::VecDeque::new();
        for s in 0..n {
            if component[s] != NO_VERTEX {
                continue;
            }
            component[s] = next;
            queue.push_back(Vertex(s as u32));
            while let Some(v) = queue.pop_front() {
                for &u in self.neighbors(v) {
                    if component[u.index()] == NO_VERTEX {
                        component[u.index()] = next;
                        queue.push_back(u);
                    }
                }
            }
            next += 1;
        }
        component
    }

    pub fn num_vertices(&self) -> usize {
        self.offsets.len() - 1
    }

    #[inline]
    pub fn neighbors(&self, v: Vertex) -> &[Vertex] {
        &self.adjacency[self.offsets[v.index()] as usize..self.offsets[v.index() + 1] as usize]
    }

    pub fn degree(&self, v: Vertex) -> usize {
        self.neighbors(v).len()
    }

    /// Connected-component label of `v`; vertices are mutually reachable iff
    /// their labels match.
    pub fn component(&self, v: Vertex) -> u32 {
        self.component[v.index()]
    }

    /// The underlying map, when the graph was built from one.
    pub fn grid(&self) -> Option<&GridMap> {
        self.grid.as_ref().map(|g| &g.map)
    }

    /// Vertex at cell (x, y), if that cell is passable.
    pub fn vertex_at(&self, x: u32, y: u32) -> Option<Vertex> {
        let g = self.grid.as_ref()?;
        if x >= g.map.width() || y >= g.map.height() {
            return None;
        }
        match g.cell_to_vertex[(y * g.map.width() + x) as usize] {
            NO_VERTEX => None,
            v => Some(Vertex(v)),
        }
    }

    /// Cell (x, y) of a vertex; panics for graphs not built from a map.
    pub fn cell_of(&self, v: Vertex) -> (u32, u32) {
        let g = self.grid.as_ref().expect("graph was not built from a grid map");
        let cell = g.vertex_to_cell[v.index()];
        (cell % g.map.width(), cell / g.map.width())
    }

    /// Reconstructs the map this graph was built from.
    pub fn to_grid_map(&self) -> Option<GridMap> {
        self.grid.as_ref().map(|g| g.map.clone())
    }
}
