//! Quotient metric graphs and the geometry of their universal-cover trees.
//!
//! A tree vertex is addressed by the non-backtracking word of oriented quotient
//! edges leading to it from the base lift. Interior points are stored relative
//! to the parent endpoint of their host edge, so equality of points is
//! decidable and distances reduce to common-prefix computations.

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;

pub type EdgeId = usize;
pub type VertexId = usize;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("vertex {vertex} has degree {degree}, at least 3 is required")]
    DegreeTooSmall { vertex: String, degree: usize },
    #[error("edge {edge} has non-positive length {length}")]
    NonPositiveLength { edge: usize, length: f64 },
    #[error("edge {edge} refers to unknown vertex {endpoint}")]
    DanglingEndpoint { edge: usize, endpoint: String },
    #[error("unrecognized length literal {0:?}")]
    BadLength(String),
    #[error("the quotient graph is not connected")]
    Disconnected,
    #[error("graph has no vertices")]
    Empty,
    #[error("malformed config: {0}")]
    Parse(String),
    #[error("boundary points coincide")]
    EqualBoundaryPoints,
    #[error("invalid word: {0}")]
    InvalidWord(String),
}

/// Vertex identifiers in config files may be strings or integers.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum VertexKey {
    Int(i64),
    Str(String),
}

impl fmt::Display for VertexKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VertexKey::Int(i) => write!(f, "{i}"),
            VertexKey::Str(s) => write!(f, "{s}"),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum LengthSpec {
    Value(f64),
    Named(String),
}

impl LengthSpec {
    #[allow(clippy::approx_constant)]
    pub fn resolve(&self) -> Result<f64, GraphError> {
        match self {
            LengthSpec::Value(v) => Ok(*v),
            LengthSpec::Named(s) => match s.trim() {
                "sqrt2" => Ok(1.414_213_562_373_095),
                "sqrt3" => Ok(1.732_050_807_568_877),
                "golden" => Ok(1.618_033_988_749_895),
                other => other
                    .parse::<f64>()
                    .map_err(|_| GraphError::BadLength(other.to_string())),
            },
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EdgeSpec {
    pub u: VertexKey,
    pub v: VertexKey,
    pub length: LengthSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

/// The on-disk description of a quotient graph.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct GraphSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub vertices: Vec<VertexKey>,
    pub edges: Vec<EdgeSpec>,
    pub base_vertex: VertexKey,
}

impl GraphSpec {
    pub fn from_json(text: &str) -> Result<Self, GraphError> {
        serde_json::from_str(text).map_err(|e| GraphError::Parse(e.to_string()))
    }

    /// Theta graph: two vertices joined by three edges of the given lengths.
    pub fn theta(name: &str, lengths: [LengthSpec; 3]) -> Self {
        let labels = ["a", "b", "c"];
        GraphSpec {
            name: Some(name.to_string()),
            vertices: vec![VertexKey::Str("u".into()), VertexKey::Str("v".into())],
            edges: lengths
                .into_iter()
                .zip(labels)
                .map(|(length, l)| EdgeSpec {
                    u: VertexKey::Str("u".into()),
                    v: VertexKey::Str("v".into()),
                    length,
                    label: Some(l.to_string()),
                })
                .collect(),
            base_vertex: VertexKey::Str("u".into()),
        }
    }

    pub fn theta_unit() -> Self {
        Self::theta(
            "theta_unit",
            [
                LengthSpec::Value(1.0),
                LengthSpec::Value(1.0),
                LengthSpec::Value(1.0),
            ],
        )
    }

    pub fn theta_dio() -> Self {
        Self::theta(
            "theta_dio",
            [
                LengthSpec::Value(1.0),
                LengthSpec::Named("sqrt2".into()),
                LengthSpec::Value(2.0),
            ],
        )
    }

    /// Multiplies every edge length by `c`.
    pub fn scaled(&self, c: f64) -> Result<Self, GraphError> {
        let mut out = self.clone();
        for e in &mut out.edges {
            e.length = LengthSpec::Value(e.length.resolve()? * c);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OrientedEdge {
    pub id: EdgeId,
    pub reverse: EdgeId,
    pub origin: VertexId,
    pub terminus: VertexId,
    pub length: f64,
    pub label: String,
}

/// Finite connected metric graph whose universal cover is the tree under study.
#[derive(Clone, Debug)]
pub struct QuotientGraph {
    names: Vec<String>,
    edges: Vec<OrientedEdge>,
    out: Vec<Vec<EdgeId>>,
    base: VertexId,
    name: String,
}

impl QuotientGraph {
    /// Validates a spec and expands each undirected edge into an oriented pair
    /// with ids `2i` (u to v) and `2i + 1` (v to u).
    pub fn from_spec(spec: &GraphSpec) -> Result<Self, GraphError> {
        if spec.vertices.is_empty() {
            return Err(GraphError::Empty);
        }
        let names: Vec<String> = spec.vertices.iter().map(|v| v.to_string()).collect();
        let index: BTreeMap<&str, usize> = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), i))
            .collect();
        let lookup = |key: &VertexKey, edge: usize| {
            let s = key.to_string();
            index
                .get(s.as_str())
                .copied()
                .ok_or(GraphError::DanglingEndpoint { edge, endpoint: s })
        };
        let mut edges = Vec::with_capacity(2 * spec.edges.len());
        let upper = spec.edges.len() <= 26;
        for (i, es) in spec.edges.iter().enumerate() {
            let u = lookup(&es.u, i)?;
            let v = lookup(&es.v, i)?;
            let length = es.length.resolve()?;
            if !(length > 0.0) || !length.is_finite() {
                return Err(GraphError::NonPositiveLength { edge: i, length });
            }
            let fwd = match (&es.label, upper) {
                (Some(l), _) => l.clone(),
                (None, true) => ((b'a' + i as u8) as char).to_string(),
                (None, false) => format!("e{i}"),
            };
            let bwd = if fwd.len() == 1 && fwd.chars().all(|c| c.is_ascii_lowercase()) {
                fwd.to_ascii_uppercase()
            } else {
                format!("{fwd}'")
            };
            edges.push(OrientedEdge {
                id: 2 * i,
                reverse: 2 * i + 1,
                origin: u,
                terminus: v,
                length,
                label: fwd,
            });
            edges.push(OrientedEdge {
                id: 2 * i + 1,
                reverse: 2 * i,
                origin: v,
                terminus: u,
                length,
                label: bwd,
            });
        }
        let mut out = vec![Vec::new(); names.len()];
        for e in &edges {
            out[e.origin].push(e.id);
        }
        for (v, o) in out.iter().enumerate() {
            if o.len() < 3 {
                return Err(GraphError::DegreeTooSmall {
                    vertex: names[v].clone(),
                    degree: o.len(),
                });
            }
        }
        let base = lookup(&spec.base_vertex, usize::MAX).map_err(|_| {
            GraphError::DanglingEndpoint {
                edge: usize::MAX,
                endpoint: spec.base_vertex.to_string(),
            }
        })?;
        let g = QuotientGraph {
            names,
            edges,
            out,
            base,
            name: spec.name.clone().unwrap_or_else(|| "graph".into()),
        };
        if !g.is_connected() {
            return Err(GraphError::Disconnected);
        }
        Ok(g)
    }

    pub fn from_json(text: &str) -> Result<Self, GraphError> {
        Self::from_spec(&GraphSpec::from_json(text)?)
    }

    pub fn theta_unit() -> Self {
        Self::from_spec(&GraphSpec::theta_unit()).expect("valid builtin")
    }

    pub fn theta_dio() -> Self {
        Self::from_spec(&GraphSpec::theta_dio()).expect("valid builtin")
    }

    fn is_connected(&self) -> bool {
        let mut seen = vec![false; self.names.len()];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(v) = stack.pop() {
            for &e in &self.out[v] {
                let t = self.edges[e].terminus;
                if !seen[t] {
                    seen[t] = true;
                    stack.push(t);
                }
            }
        }
        seen.iter().all(|&s| s)
    }

    pub fn name(&self) -> &str {
        &self.name
    }
    pub fn num_vertices(&self) -> usize {
        self.names.len()
    }
    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }
    pub fn vertex_name(&self, v: VertexId) -> &str {
        &self.names[v]
    }
    pub fn edges(&self) -> &[OrientedEdge] {
        &self.edges
    }
    pub fn edge(&self, e: EdgeId) -> &OrientedEdge {
        &self.edges[e]
    }
    pub fn len(&self, e: EdgeId) -> f64 {
        self.edges[e].length
    }
    pub fn rev(&self, e: EdgeId) -> EdgeId {
        self.edges[e].reverse
    }
    pub fn origin(&self, e: EdgeId) -> VertexId {
        self.edges[e].origin
    }
    pub fn terminus(&self, e: EdgeId) -> VertexId {
        self.edges[e].terminus
    }
    pub fn base(&self) -> VertexId {
        self.base
    }
    /// Oriented edges leaving `v`.
    pub fn out_edges(&self, v: VertexId) -> &[EdgeId] {
        &self.out[v]
    }
    pub fn degree(&self, v: VertexId) -> usize {
        self.out[v].len()
    }
    pub fn max_degree(&self) -> usize {
        self.out.iter().map(Vec::len).max().unwrap_or(0)
    }
    pub fn min_length(&self) -> f64 {
        self.edges.iter().map(|e| e.length).fold(f64::INFINITY, f64::min)
    }
    pub fn max_length(&self) -> f64 {
        self.edges.iter().map(|e| e.length).fold(0.0, f64::max)
    }
    /// Edges that may follow `e` in a non-backtracking path.
    pub fn successors(&self, e: EdgeId) -> impl Iterator<Item = EdgeId> + '_ {
        let r = self.rev(e);
        self.out[self.terminus(e)].iter().copied().filter(move |&f| f != r)
    }
    /// Edges that may precede `e` in a non-backtracking path.
    pub fn predecessors(&self, e: EdgeId) -> impl Iterator<Item = EdgeId> + '_ {
        let o = self.origin(e);
        self.out[o]
            .iter()
            .copied()
            .filter(move |&f| f != e)
            .map(move |f| self.rev(f))
    }
    pub fn composable(&self, e: EdgeId, f: EdgeId) -> bool {
        self.terminus(e) == self.origin(f) && f != self.rev(e)
    }

    pub fn word_label(&self, word: &[EdgeId]) -> String {
        if word.is_empty() {
            return "-".into();
        }
        let sep = if self.edges.iter().all(|e| e.label.chars().count() == 1) {
            ""
        } else {
            "."
        };
        word.iter()
            .map(|&e| self.edges[e].label.as_str())
            .collect::<Vec<_>>()
            .join(sep)
    }

    pub fn edge_by_label(&self, label: &str) -> Option<EdgeId> {
        self.edges.iter().position(|e| e.label == label)
    }

    /// Parses a word of single-letter labels like `"aBc"`, or dot-separated labels.
    pub fn parse_word(&self, text: &str) -> Result<Vec<EdgeId>, GraphError> {
        if text.is_empty() || text == "-" {
            return Ok(Vec::new());
        }
        let parts: Vec<String> = if text.contains('.') {
            text.split('.').map(str::to_string).collect()
        } else {
            text.chars().map(|c| c.to_string()).collect()
        };
        parts
            .iter()
            .map(|p| {
                self.edge_by_label(p)
                    .ok_or_else(|| GraphError::InvalidWord(format!("unknown label {p}")))
            })
            .collect()
    }

    pub fn word_length(&self, word: &[EdgeId]) -> f64 {
        word.iter().map(|&e| self.len(e)).sum()
    }

    /// Checks that `word` is a non-backtracking path starting at the base vertex.
    pub fn check_word(&self, word: &[EdgeId]) -> Result<(), GraphError> {
        let mut at = self.base;
        let mut prev: Option<EdgeId> = None;
        for &e in word {
            if e >= self.edges.len() {
                return Err(GraphError::InvalidWord(format!("edge id {e} out of range")));
            }
            if self.origin(e) != at {
                return Err(GraphError::InvalidWord("edges do not compose".into()));
            }
            if prev == Some(self.rev(e)) {
                return Err(GraphError::InvalidWord("word backtracks".into()));
            }
            at = self.terminus(e);
            prev = Some(e);
        }
        Ok(())
    }
}

/// A vertex of the universal-cover tree, addressed from the base lift.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize)]
pub struct TreeVertex {
    pub word: Vec<EdgeId>,
}

impl TreeVertex {
    pub fn root() -> Self {
        TreeVertex { word: Vec::new() }
    }

    pub fn from_word(g: &QuotientGraph, word: Vec<EdgeId>) -> Result<Self, GraphError> {
        g.check_word(&word)?;
        Ok(TreeVertex { word })
    }

    /// The quotient vertex this tree vertex projects to.
    pub fn project(&self, g: &QuotientGraph) -> VertexId {
        self.word.last().map_or(g.base(), |&e| g.terminus(e))
    }

    pub fn depth(&self) -> usize {
        self.word.len()
    }

    pub fn parent(&self) -> Option<TreeVertex> {
        if self.word.is_empty() {
            None
        } else {
            Some(TreeVertex {
                word: self.word[..self.word.len() - 1].to_vec(),
            })
        }
    }

    pub fn last(&self) -> Option<EdgeId> {
        self.word.last().copied()
    }

    pub fn child(&self, e: EdgeId) -> TreeVertex {
        let mut word = self.word.clone();
        word.push(e);
        TreeVertex { word }
    }

    /// Oriented quotient edges leading to children of this vertex.
    pub fn child_edges<'a>(&self, g: &'a QuotientGraph) -> impl Iterator<Item = EdgeId> + 'a {
        let back = self.last().map(|e| g.rev(e));
        g.out_edges(self.project(g))
            .iter()
            .copied()
            .filter(move |&f| Some(f) != back)
    }

    /// Moves across the tree edge of type `e` leaving this vertex.
    pub fn step(&self, g: &QuotientGraph, e: EdgeId) -> TreeVertex {
        debug_assert_eq!(g.origin(e), self.project(g));
        if self.last().map(|l| g.rev(l)) == Some(e) {
            self.parent().expect("nonempty word")
        } else {
            self.child(e)
        }
    }

    pub fn dist_from_root(&self, g: &QuotientGraph) -> f64 {
        g.word_length(&self.word)
    }
}

/// A point of the tree: a vertex, or an interior point of the edge of type
/// `edge` leading from `anchor` to its child, at distance `offset` from `anchor`.
#[derive(Clone, Debug, PartialEq)]
pub struct TreePoint {
    pub anchor: TreeVertex,
    pub edge: Option<EdgeId>,
    pub offset: f64,
}

impl From<TreeVertex> for TreePoint {
    fn from(v: TreeVertex) -> Self {
        TreePoint::vertex(v)
    }
}

impl TreePoint {
    pub fn vertex(v: TreeVertex) -> Self {
        TreePoint {
            anchor: v,
            edge: None,
            offset: 0.0,
        }
    }

    pub fn root() -> Self {
        Self::vertex(TreeVertex::root())
    }

    /// Point at distance `offset` from `at` along the tree edge of type `e`
    /// leaving `at`; returns the canonical representation.
    pub fn along(g: &QuotientGraph, at: &TreeVertex, e: EdgeId, offset: f64) -> Self {
        let l = g.len(e);
        assert!(
            (0.0..=l).contains(&offset),
            "offset {offset} outside [0, {l}]"
        );
        assert_eq!(g.origin(e), at.project(g), "edge does not leave vertex");
        if offset == 0.0 {
            return Self::vertex(at.clone());
        }
        if offset == l {
            return Self::vertex(at.step(g, e));
        }
        if at.last().map(|x| g.rev(x)) == Some(e) {
            let parent = at.parent().expect("nonempty word");
            let fwd = at.last().expect("nonempty word");
            TreePoint {
                anchor: parent,
                edge: Some(fwd),
                offset: l - offset,
            }
        } else {
            TreePoint {
                anchor: at.clone(),
                edge: Some(e),
                offset,
            }
        }
    }

    pub fn is_vertex(&self) -> bool {
        self.edge.is_none()
    }

    pub fn as_vertex(&self) -> Option<&TreeVertex> {
        if self.edge.is_none() {
            Some(&self.anchor)
        } else {
            None
        }
    }

    /// Root-path word: the anchor word, extended by the host edge for interior points.
    pub fn path_word(&self) -> Vec<EdgeId> {
        let mut w = self.anchor.word.clone();
        if let Some(e) = self.edge {
            w.push(e);
        }
        w
    }

    /// Position along the last letter of the path word (`length` for a vertex).
    fn last_pos(&self, g: &QuotientGraph) -> f64 {
        match self.edge {
            Some(_) => self.offset,
            None => self.anchor.last().map_or(0.0, |e| g.len(e)),
        }
    }

    pub fn dist_from_root(&self, g: &QuotientGraph) -> f64 {
        self.anchor.dist_from_root(g) + self.offset
    }

    /// Human-readable address: `word@offset`.
    pub fn label(&self, g: &QuotientGraph) -> String {
        match self.edge {
            None => g.word_label(&self.anchor.word),
            Some(_) => format!("{}@{}", g.word_label(&self.path_word()), self.offset),
        }
    }
}

/// A sub-interval `[from, to]` of an oriented edge, traversed from `from` to
/// `to` (positions measured from the origin of `edge`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Piece {
    pub edge: EdgeId,
    pub from: f64,
    pub to: f64,
}

impl Piece {
    pub fn len(&self) -> f64 {
        self.to - self.from
    }
    pub fn reversed(&self, g: &QuotientGraph) -> Piece {
        let l = g.len(self.edge);
        Piece {
            edge: g.rev(self.edge),
            from: l - self.to,
            to: l - self.from,
        }
    }
    pub fn is_full(&self, g: &QuotientGraph) -> bool {
        self.from == 0.0 && self.to == g.len(self.edge)
    }
}

#[derive(Clone, Debug)]
pub struct GeodesicSegment {
    pub start: TreePoint,
    pub end: TreePoint,
    pub pieces: Vec<Piece>,
    pub length: f64,
}

impl GeodesicSegment {
    /// Oriented edge types traversed, including partially traversed ones.
    pub fn edge_word(&self) -> Vec<EdgeId> {
        self.pieces.iter().map(|p| p.edge).collect()
    }
}

fn common_prefix(a: &[EdgeId], b: &[EdgeId]) -> usize {
    a.iter().zip(b).take_while(|(x, y)| x == y).count()
}

/// Metric distance in the tree; evaluated in a canonical argument order so
/// that it is bitwise symmetric.
pub fn tree_distance(g: &QuotientGraph, x: &TreePoint, y: &TreePoint) -> f64 {
    let key = |p: &TreePoint| (p.anchor.word.clone(), p.edge, p.offset);
    if key(x).partial_cmp(&key(y)) == Some(std::cmp::Ordering::Greater) {
        geodesic(g, y, x).length
    } else {
        geodesic(g, x, y).length
    }
}

/// The unique geodesic from `x` to `y`, as a list of edge pieces.
pub fn geodesic(g: &QuotientGraph, x: &TreePoint, y: &TreePoint) -> GeodesicSegment {
    let wx = x.path_word();
    let wy = y.path_word();
    let c = common_prefix(&wx, &wy);
    let qx = x.last_pos(g);
    let qy = y.last_pos(g);
    let mut pieces = Vec::new();
    let tail = |w: &[EdgeId], q: f64, out: &mut Vec<Piece>| {
        for (i, &e) in w.iter().enumerate().skip(c) {
            let to = if i + 1 == w.len() { q } else { g.len(e) };
            out.push(Piece { edge: e, from: 0.0, to });
        }
    };
    match (wx.len() > c, wy.len() > c) {
        (false, false) => {
            if c > 0 && qx != qy {
                let e = wx[c - 1];
                let p = Piece {
                    edge: e,
                    from: qx.min(qy),
                    to: qx.max(qy),
                };
                pieces.push(if qx < qy { p } else { p.reversed(g) });
            }
        }
        (false, true) => {
            if c > 0 && qx < g.len(wx[c - 1]) {
                pieces.push(Piece {
                    edge: wx[c - 1],
                    from: qx,
                    to: g.len(wx[c - 1]),
                });
            }
            tail(&wy, qy, &mut pieces);
        }
        (true, false) => {
            let mut up = Vec::new();
            if c > 0 && qy < g.len(wy[c - 1]) {
                up.push(Piece {
                    edge: wy[c - 1],
                    from: qy,
                    to: g.len(wy[c - 1]),
                });
            }
            tail(&wx, qx, &mut up);
            pieces.extend(up.iter().rev().map(|p| p.reversed(g)));
        }
        (true, true) => {
            let mut up = Vec::new();
            tail(&wx, qx, &mut up);
            pieces.extend(up.iter().rev().map(|p| p.reversed(g)));
            tail(&wy, qy, &mut pieces);
        }
    }
    let length = pieces.iter().map(Piece::len).sum();
    GeodesicSegment {
        start: x.clone(),
        end: y.clone(),
        pieces,
        length,
    }
}

/// Point at distance `s` from `x` along the geodesic to `y` (clamped to the segment).
pub fn point_along(g: &QuotientGraph, x: &TreePoint, y: &TreePoint, s: f64) -> TreePoint {
    let seg = geodesic(g, x, y);
    walk_pieces(g, x, &seg.pieces, s)
}

/// Follows `pieces` (starting at `x`) for distance `s`.
pub fn walk_pieces(g: &QuotientGraph, x: &TreePoint, pieces: &[Piece], s: f64) -> TreePoint {
    let mut at = x.clone();
    let mut left = s;
    for p in pieces {
        let l = p.len();
        let start_vertex = vertex_before_piece(&at, p);
        if left < l {
            return TreePoint::along(g, &start_vertex, p.edge, p.from + left);
        }
        left -= l;
        at = if p.to == g.len(p.edge) {
            TreePoint::vertex(start_vertex.step(g, p.edge))
        } else {
            TreePoint::along(g, &start_vertex, p.edge, p.to)
        };
    }
    at
}

/// The tree vertex at the origin end of the edge hosting piece `p`, where `at`
/// is the point at which `p` starts.
fn vertex_before_piece(at: &TreePoint, p: &Piece) -> TreeVertex {
    match at.edge {
        None => {
            // `at` is the vertex at position p.from == 0 of p.edge.
            at.anchor.clone()
        }
        Some(e) => {
            if p.edge == e {
                at.anchor.clone()
            } else {
                // Travelling the host edge backwards: origin of p.edge is the child vertex.
                at.anchor.child(e)
            }
        }
    }
}

/// Eventually periodic boundary ray from the base lift: `prefix`, then `pre`
/// once, then `period` repeated forever.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryRay {
    pub prefix: TreeVertex,
    pub pre: Vec<EdgeId>,
    pub period: Vec<EdgeId>,
}

impl BoundaryRay {
    pub fn new(
        g: &QuotientGraph,
        prefix: TreeVertex,
        pre: Vec<EdgeId>,
        period: Vec<EdgeId>,
    ) -> Result<Self, GraphError> {
        if period.is_empty() {
            return Err(GraphError::InvalidWord("empty period".into()));
        }
        let r = BoundaryRay {
            prefix,
            pre,
            period,
        };
        let n = r.prefix.depth() + r.pre.len() + 2 * r.period.len() + 1;
        let w: Vec<EdgeId> = (0..n).map(|i| r.letter(i)).collect();
        g.check_word(&w)?;
        Ok(r)
    }

    /// Ray that starts with `word` and then continues periodically with `period`.
    pub fn from_word(
        g: &QuotientGraph,
        word: Vec<EdgeId>,
        period: Vec<EdgeId>,
    ) -> Result<Self, GraphError> {
        Self::new(g, TreeVertex::root(), word, period)
    }

    /// Letter `i` of the full infinite word.
    pub fn letter(&self, i: usize) -> EdgeId {
        let a = self.prefix.depth();
        if i < a {
            return self.prefix.word[i];
        }
        let i = i - a;
        if i < self.pre.len() {
            return self.pre[i];
        }
        self.period[(i - self.pre.len()) % self.period.len()]
    }

    /// Vertex after the first `n` letters.
    pub fn vertex(&self, n: usize) -> TreeVertex {
        TreeVertex {
            word: (0..n).map(|i| self.letter(i)).collect(),
        }
    }

    /// Length of the eventually periodic part before the period starts.
    pub fn transient_len(&self) -> usize {
        self.prefix.depth() + self.pre.len()
    }

    /// Number of leading letters shared with `other`, or `None` if the rays coincide.
    pub fn common_letters(&self, other: &BoundaryRay) -> Option<usize> {
        let bound = self.transient_len().max(other.transient_len())
            + lcm(self.period.len(), other.period.len())
            + 1;
        (0..bound).find(|&i| self.letter(i) != other.letter(i))
    }

    /// First vertex on the ray at root distance at least `s`.
    pub fn vertex_beyond(&self, g: &QuotientGraph, s: f64) -> TreeVertex {
        let mut acc = 0.0;
        let mut n = 0;
        while acc < s {
            acc += g.len(self.letter(n));
            n += 1;
        }
        self.vertex(n)
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}

/// Either end of a Gromov product.
#[derive(Clone, Copy, Debug)]
pub enum End<'a> {
    Point(&'a TreePoint),
    Ray(&'a BoundaryRay),
}

fn point_depth(p: &TreePoint) -> usize {
    p.path_word().len()
}

/// Gromov product `(p|q)_x`; for boundary arguments it is the distance from
/// `x` to the bi-infinite geodesic or ray.
pub fn gromov_product(
    g: &QuotientGraph,
    x: &TreePoint,
    p: End<'_>,
    q: End<'_>,
) -> Result<f64, GraphError> {
    let mut n = point_depth(x) + 2;
    for end in [p, q] {
        if let End::Point(pt) = end {
            n = n.max(point_depth(pt) + 2);
        }
    }
    if let (End::Ray(a), End::Ray(b)) = (p, q) {
        let c = a.common_letters(b).ok_or(GraphError::EqualBoundaryPoints)?;
        n = n.max(c + 2);
    }
    let materialize = |e: End<'_>| match e {
        End::Point(pt) => pt.clone(),
        End::Ray(r) => TreePoint::vertex(r.vertex(n)),
    };
    let (pp, qq) = (materialize(p), materialize(q));
    Ok(0.5 * (tree_distance(g, x, &pp) + tree_distance(g, x, &qq) - tree_distance(g, &pp, &qq)))
}

/// Busemann cocycle `β_ξ(x, y) = lim d(x, z) − d(y, z)` as `z → ξ`.
pub fn busemann(g: &QuotientGraph, xi: &BoundaryRay, x: &TreePoint, y: &TreePoint) -> f64 {
    let n = point_depth(x).max(point_depth(y)) + 2;
    let z = TreePoint::vertex(xi.vertex(n));
    tree_distance(g, x, &z) - tree_distance(g, y, &z)
}

/// Whether `y` lies on `[x, z]`.
pub fn on_segment(g: &QuotientGraph, x: &TreePoint, y: &TreePoint, z: &TreePoint) -> bool {
    let d = tree_distance(g, x, z);
    (tree_distance(g, x, y) + tree_distance(g, y, z) - d).abs() <= 1e-9 * (1.0 + d)
}

/// Whether the ray from `x` to `ξ` passes through `y`.
pub fn shadow_contains(g: &QuotientGraph, x: &TreePoint, y: &TreePoint, xi: &BoundaryRay) -> bool {
    let n = point_depth(x).max(point_depth(y)) + 2;
    let z = TreePoint::vertex(xi.vertex(n));
    on_segment(g, x, y, &z)
}

/// A closed cyclically reduced non-backtracking word in the quotient.
#[derive(Clone, Debug, Serialize)]
pub struct Cycle {
    pub word: Vec<EdgeId>,
    pub label: String,
    pub length: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SpectrumDiagnostics {
    /// `"lattice"` when all enumerated lengths are commensurable, else `"dense"`.
    pub density: String,
    /// Common unit generating all lengths in the lattice case.
    pub lattice_unit: Option<f64>,
    pub beta: f64,
    /// Smallest `q^β |l/l' − p/q|` over enumerated pairs and convergents with `q ≤ q_max`.
    pub min_approx_quality: f64,
    pub q_max: u64,
    /// Pair of lengths realizing the minimum.
    pub worst_pair: Option<(f64, f64)>,
}

#[derive(Clone, Debug, Serialize)]
pub struct LengthSpectrum {
    pub cycles: Vec<Cycle>,
    pub diagnostics: SpectrumDiagnostics,
}

/// Primitive cyclic words up to `max_word_length`, one representative per
/// rotation class, with translation lengths and lattice/Diophantine evidence.
pub fn length_spectrum(g: &QuotientGraph, max_word_length: usize, beta: f64) -> LengthSpectrum {
    assert!(max_word_length >= 2);
    let mut cycles = Vec::new();
    let mut word = Vec::new();
    for e in 0..g.num_edges() {
        word.clear();
        word.push(e);
        enumerate_cycles(g, &mut word, max_word_length, &mut cycles);
    }
    cycles.sort_by(|a: &Cycle, b| {
        a.word
            .len()
            .cmp(&b.word.len())
            .then_with(|| a.word.cmp(&b.word))
    });
    let diagnostics = spectrum_diagnostics(&cycles, beta, 10_000);
    LengthSpectrum {
        cycles,
        diagnostics,
    }
}

fn enumerate_cycles(g: &QuotientGraph, word: &mut Vec<EdgeId>, max: usize, out: &mut Vec<Cycle>) {
    let first = word[0];
    let last = *word.last().unwrap();
    if g.composable(last, first) && is_canonical_rotation(word) && is_primitive(word) {
        out.push(Cycle {
            word: word.clone(),
            label: g.word_label(word),
            length: g.word_length(word),
        });
    }
    if word.len() == max {
        return;
    }
    let next: Vec<EdgeId> = g.successors(last).collect();
    for f in next {
        if f < first {
            continue;
        }
        word.push(f);
        enumerate_cycles(g, word, max, out);
        word.pop();
    }
}

fn is_canonical_rotation(w: &[EdgeId]) -> bool {
    let n = w.len();
    (1..n).all(|r| {
        let rot = w[r..].iter().chain(&w[..r]);
        w.iter().cmp(rot) != std::cmp::Ordering::Greater
    })
}

fn is_primitive(w: &[EdgeId]) -> bool {
    let n = w.len();
    (1..n).filter(|p| n.is_multiple_of(*p)).all(|p| (0..n).any(|i| w[i] != w[i % p]))
}

/// Continued-fraction convergents `(p, q)` of `x` with `q ≤ q_max`.
pub fn convergents(x: f64, q_max: u64) -> Vec<(u64, u64)> {
    let mut out = Vec::new();
    let (mut p0, mut q0, mut p1, mut q1) = (0u64, 1u64, 1u64, 0u64);
    let mut r = x;
    for _ in 0..64 {
        let a = r.floor();
        if a > 1e15 {
            break;
        }
        let a = a as u64;
        let p2 = a.saturating_mul(p1).saturating_add(p0);
        let q2 = a.saturating_mul(q1).saturating_add(q0);
        if q2 > q_max {
            break;
        }
        out.push((p2, q2));
        let frac = r - r.floor();
        if frac < 1e-13 {
            break;
        }
        r = 1.0 / frac;
        (p0, q0, p1, q1) = (p1, q1, p2, q2);
    }
    out
}

fn spectrum_diagnostics(cycles: &[Cycle], beta: f64, q_max: u64) -> SpectrumDiagnostics {
    let mut lengths: Vec<f64> = cycles.iter().map(|c| c.length).collect();
    lengths.sort_by(f64::total_cmp);
    lengths.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    let mut min_q = f64::INFINITY;
    let mut worst = None;
    let mut commensurable = true;
    for (i, &a) in lengths.iter().enumerate() {
        for &b in &lengths[i + 1..] {
            let ratio = b / a;
            let conv = convergents(ratio, q_max);
            let exact = conv
                .last()
                .is_some_and(|&(p, q)| (ratio - p as f64 / q as f64).abs() < 1e-12 * ratio);
            if exact {
                continue;
            }
            commensurable = false;
            for &(p, q) in &conv {
                let v = (q as f64).powf(beta) * (ratio - p as f64 / q as f64).abs();
                if v < min_q {
                    min_q = v;
                    worst = Some((a, b));
                }
            }
        }
    }
    let lattice_unit = if commensurable && !lengths.is_empty() {
        Some(lengths.iter().skip(1).fold(lengths[0], |u, &l| real_gcd(u, l)))
    } else {
        None
    };
    SpectrumDiagnostics {
        density: if commensurable { "lattice" } else { "dense" }.into(),
        lattice_unit,
        beta,
        min_approx_quality: min_q,
        q_max,
        worst_pair: worst,
    }
}

fn real_gcd(a: f64, b: f64) -> f64 {
    let (mut a, mut b) = (a.max(b), a.min(b));
    while b > 1e-9 * a {
        let r = a % b;
        a = b;
        b = if r > b - 1e-9 * a { 0.0 } else { r };
    }
    a
}

/// Random non-backtracking vertex word of exactly `depth` letters.
pub fn random_vertex<R: Rng + ?Sized>(g: &QuotientGraph, rng: &mut R, depth: usize) -> TreeVertex {
    let mut v = TreeVertex::root();
    for _ in 0..depth {
        let choices: Vec<EdgeId> = v.child_edges(g).collect();
        let e = choices[rng.gen_range(0..choices.len())];
        v = v.child(e);
    }
    v
}

/// Random vertex or interior point with root-path word of at most `max_depth` letters.
pub fn random_point<R: Rng + ?Sized>(g: &QuotientGraph, rng: &mut R, max_depth: usize) -> TreePoint {
    let depth = rng.gen_range(0..=max_depth);
    let v = random_vertex(g, rng, depth);
    if depth == max_depth || rng.gen_bool(0.5) {
        return TreePoint::vertex(v);
    }
    let choices: Vec<EdgeId> = v.child_edges(g).collect();
    let e = choices[rng.gen_range(0..choices.len())];
    let l = g.len(e);
    let off = rng.gen_range(0.0..l);
    if off <= 0.0 {
        TreePoint::vertex(v)
    } else {
        TreePoint::along(g, &v, e, off)
    }
}

/// Random eventually periodic ray whose first `depth` letters are random.
pub fn random_ray<R: Rng + ?Sized>(g: &QuotientGraph, rng: &mut R, depth: usize) -> BoundaryRay {
    let pre = random_vertex(g, rng, depth);
    loop {
        let len = rng.gen_range(2..=6);
        let mut v = pre.clone();
        for _ in 0..len {
            let choices: Vec<EdgeId> = v.child_edges(g).collect();
            v = v.child(choices[rng.gen_range(0..choices.len())]);
        }
        let period = v.word[depth..].to_vec();
        if let Ok(r) = BoundaryRay::from_word(g, pre.word.clone(), period) {
            return r;
        }
    }
}

/// Vertices of the tree ball of combinatorial depth `depth` around the root.
pub fn vertices_to_depth(g: &QuotientGraph, depth: usize) -> Vec<TreeVertex> {
    let mut out = vec![TreeVertex::root()];
    let mut frontier = vec![TreeVertex::root()];
    for _ in 0..depth {
        let mut next = Vec::new();
        for v in &frontier {
            for e in v.child_edges(g) {
                next.push(v.child(e));
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}
