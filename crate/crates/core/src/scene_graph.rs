//! Scene graph data model, the `<scene>` JSON schema and graph validation.
//!
//! A scene graph is a set of objects (id, label, absolute-pixel box) and
//! directed relation triplets between them. The same type is used for full
//! ground-truth graphs, question-aligned subgraphs and model predictions.
//!
//! Wire format:
//!
//! ```text
//! {"objects":[{"id":"<text>","label":"<text>","bbox":[x1,y1,x2,y2]}, ...],
//!  "relations":[["<subject_id>","<predicate>","<object_id>"], ...]}
//! ```

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;

use serde::de::Error as _;
use serde::ser::SerializeStruct;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;

/// Axis-aligned box in absolute pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self::new(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)
    }

    /// First shape problem found, if any. Image bounds are checked only when given.
    pub fn check(&self, image_size: Option<(u32, u32)>) -> Option<BBoxIssue> {
        if !self.as_array().iter().all(|c| c.is_finite()) {
            return Some(BBoxIssue::NonFinite);
        }
        if self.x1 == self.x2 {
            return Some(BBoxIssue::ZeroWidth);
        }
        if self.y1 == self.y2 {
            return Some(BBoxIssue::ZeroHeight);
        }
        if self.x1 > self.x2 {
            return Some(BBoxIssue::NegativeWidth);
        }
        if self.y1 > self.y2 {
            return Some(BBoxIssue::NegativeHeight);
        }
        if let Some((w, h)) = image_size {
            if self.x1 < 0.0 || self.y1 < 0.0 || self.x2 > f64::from(w) || self.y2 > f64::from(h) {
                return Some(BBoxIssue::OutsideImage);
            }
        }
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BBoxIssue {
    NotAnArray,
    WrongArity,
    NotANumber,
    NonFinite,
    ZeroWidth,
    ZeroHeight,
    NegativeWidth,
    NegativeHeight,
    OutsideImage,
}

impl fmt::Display for BBoxIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            BBoxIssue::NotAnArray => "bbox is not an array",
            BBoxIssue::WrongArity => "bbox must have exactly 4 numbers",
            BBoxIssue::NotANumber => "bbox coordinate is not a number",
            BBoxIssue::NonFinite => "bbox coordinate is not finite",
            BBoxIssue::ZeroWidth => "zero width",
            BBoxIssue::ZeroHeight => "zero height",
            BBoxIssue::NegativeWidth => "negative width",
            BBoxIssue::NegativeHeight => "negative height",
            BBoxIssue::OutsideImage => "outside image bounds",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectNode {
    pub id: String,
    pub label: String,
    pub bbox: BBox,
}

impl ObjectNode {
    pub fn new(id: impl Into<String>, label: impl Into<String>, bbox: BBox) -> Self {
        Self { id: id.into(), label: label.into(), bbox }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RelationTriplet {
    pub subject_id: String,
    pub predicate: String,
    pub object_id: String,
}

impl RelationTriplet {
    pub fn new(subject: impl Into<String>, predicate: impl Into<String>, object: impl Into<String>) -> Self {
        Self { subject_id: subject.into(), predicate: predicate.into(), object_id: object.into() }
    }
}

/// Objects plus relations. Equality ignores insertion order.
#[derive(Debug, Clone, Default)]
pub struct SceneGraph {
    pub objects: Vec<ObjectNode>,
    pub relations: Vec<RelationTriplet>,
    pub image_size: Option<(u32, u32)>,
}

impl SceneGraph {
    pub fn new(objects: Vec<ObjectNode>, relations: Vec<RelationTriplet>) -> Self {
        Self { objects, relations, image_size: None }
    }

    pub fn with_image_size(mut self, width: u32, height: u32) -> Self {
        self.image_size = Some((width, height));
        self
    }

    pub fn num_objects(&self) -> usize {
        self.objects.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty() && self.relations.is_empty()
    }

    pub fn object(&self, id: &str) -> Option<&ObjectNode> {
        self.objects.iter().find(|o| o.id == id)
    }

    /// Copy with objects sorted by id and relations sorted lexicographically.
    pub fn canonical(&self) -> SceneGraph {
        let mut objects = self.objects.clone();
        objects.sort_by(|a, b| a.id.cmp(&b.id).then_with(|| a.label.cmp(&b.label)));
        let mut relations = self.relations.clone();
        relations.sort();
        SceneGraph { objects, relations, image_size: self.image_size }
    }

    /// True when every object and relation of `self` also occurs in `other`.
    pub fn is_subgraph_of(&self, other: &SceneGraph) -> bool {
        self.objects.iter().all(|o| other.objects.contains(o))
            && self.relations.iter().all(|r| other.relations.contains(r))
    }
}

impl PartialEq for SceneGraph {
    fn eq(&self, other: &Self) -> bool {
        let (a, b) = (self.canonical(), other.canonical());
        a.objects == b.objects && a.relations == b.relations && a.image_size == b.image_size
    }
}

/// Legal predicate set for strict-vocabulary validation.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredicateVocabulary {
    base: BTreeSet<String>,
    extended: BTreeSet<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum VocabularyError {
    #[error("predicate {0:?} is listed in both base and extended sets")]
    Overlap(String),
    #[error("vocabulary file is not valid: {0}")]
    Parse(String),
}

fn normalize_predicate(p: &str) -> String {
    p.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

impl PredicateVocabulary {
    pub fn new<I, J, S, T>(base: I, extended: J) -> Result<Self, VocabularyError>
    where
        I: IntoIterator<Item = S>,
        J: IntoIterator<Item = T>,
        S: AsRef<str>,
        T: AsRef<str>,
    {
        let base: BTreeSet<String> = base.into_iter().map(|s| normalize_predicate(s.as_ref())).collect();
        let extended: BTreeSet<String> = extended.into_iter().map(|s| normalize_predicate(s.as_ref())).collect();
        if let Some(dup) = base.intersection(&extended).next() {
            return Err(VocabularyError::Overlap(dup.clone()));
        }
        Ok(Self { base, extended })
    }

    /// Parses a TOML document with `base = [...]` and `extended = [...]` arrays.
    pub fn from_toml_str(text: &str) -> Result<Self, VocabularyError> {
        #[derive(Deserialize)]
        struct Raw {
            #[serde(default)]
            base: Vec<String>,
            #[serde(default)]
            extended: Vec<String>,
        }
        let raw: Raw = toml::from_str(text).map_err(|e| VocabularyError::Parse(e.to_string()))?;
        Self::new(raw.base, raw.extended)
    }

    pub fn contains(&self, predicate: &str) -> bool {
        let p = normalize_predicate(predicate);
        self.base.contains(&p) || self.extended.contains(&p)
    }

    pub fn base(&self) -> &BTreeSet<String> {
        &self.base
    }

    pub fn extended(&self) -> &BTreeSet<String> {
        &self.extended
    }

    pub fn len(&self) -> usize {
        self.base.len() + self.extended.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One schema or invariant problem, with its location.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    NotParseable { reason: String },
    MissingField { object: usize, field: String },
    EmptyField { object: usize, field: String },
    BadBBox { object: usize, issue: BBoxIssue },
    MalformedRelation { relation: usize, reason: String },
    SelfRelation { relation: usize },
    DanglingRelationEndpoint { relation: usize, id: String },
    DuplicateId { id: String },
    UnknownPredicate { relation: usize, predicate: String },
}

impl Violation {
    pub fn code(&self) -> &'static str {
        match self {
            Violation::NotParseable { .. } => "NotParseable",
            Violation::MissingField { .. } => "MissingField",
            Violation::EmptyField { .. } => "EmptyField",
            Violation::BadBBox { .. } => "BadBBox",
            Violation::MalformedRelation { .. } => "MalformedRelation",
            Violation::SelfRelation { .. } => "SelfRelation",
            Violation::DanglingRelationEndpoint { .. } => "DanglingRelationEndpoint",
            Violation::DuplicateId { .. } => "DuplicateId",
            Violation::UnknownPredicate { .. } => "UnknownPredicate",
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NotParseable { reason } => write!(f, "scene is not parseable JSON: {reason}"),
            Violation::MissingField { object, field } => write!(f, "object {object}: missing field `{field}`"),
            Violation::EmptyField { object, field } => write!(f, "object {object}: field `{field}` is empty"),
            Violation::BadBBox { object, issue } => write!(f, "object {object}: bad bbox ({issue})"),
            Violation::MalformedRelation { relation, reason } => write!(f, "relation {relation}: {reason}"),
            Violation::SelfRelation { relation } => write!(f, "relation {relation}: subject and object are the same"),
            Violation::DanglingRelationEndpoint { relation, id } => {
                write!(f, "relation {relation}: endpoint `{id}` is not an object id")
            }
            Violation::DuplicateId { id } => write!(f, "duplicate object id `{id}`"),
            Violation::UnknownPredicate { relation, predicate } => {
                write!(f, "relation {relation}: predicate `{predicate}` not in vocabulary")
            }
        }
    }
}

/// Checks every graph invariant and returns all violations in a fixed order.
///
/// Passing a vocabulary turns on strict predicate checking.
pub fn validate_graph(g: &SceneGraph, vocab: Option<&PredicateVocabulary>) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut seen: HashMap<&str, usize> = HashMap::new();
    let mut dup_ids: BTreeSet<&str> = BTreeSet::new();
    for (i, o) in g.objects.iter().enumerate() {
        if o.id.trim().is_empty() {
            out.push(Violation::EmptyField { object: i, field: "id".into() });
        }
        if o.label.trim().is_empty() {
            out.push(Violation::EmptyField { object: i, field: "label".into() });
        }
        if let Some(issue) = o.bbox.check(g.image_size) {
            out.push(Violation::BadBBox { object: i, issue });
        }
        if seen.insert(o.id.as_str(), i).is_some() {
            dup_ids.insert(o.id.as_str());
        }
    }
    out.extend(dup_ids.into_iter().map(|id| Violation::DuplicateId { id: id.to_string() }));
    out.extend(relation_violations(&g.relations, &seen.keys().copied().collect(), vocab));
    out
}

fn relation_violations(
    relations: &[RelationTriplet],
    ids: &HashSet<&str>,
    vocab: Option<&PredicateVocabulary>,
) -> Vec<Violation> {
    let mut out = Vec::new();
    for (r, rel) in relations.iter().enumerate() {
        if rel.predicate.trim().is_empty() {
            out.push(Violation::MalformedRelation { relation: r, reason: "empty predicate".into() });
        }
        if rel.subject_id == rel.object_id {
            out.push(Violation::SelfRelation { relation: r });
        }
        for end in [&rel.subject_id, &rel.object_id] {
            if !ids.contains(end.as_str()) {
                out.push(Violation::DanglingRelationEndpoint { relation: r, id: end.clone() });
                // A self-relation on a missing id is reported once.
                if rel.subject_id == rel.object_id {
                    break;
                }
            }
        }
        if let Some(v) = vocab {
            if !rel.predicate.trim().is_empty() && !v.contains(&rel.predicate) {
                out.push(Violation::UnknownPredicate { relation: r, predicate: rel.predicate.clone() });
            }
        }
    }
    out
}

/// Parses a `<scene>` payload; on failure returns every violation found.
pub fn parse_scene_json(raw: &str) -> Result<SceneGraph, Vec<Violation>> {
    match serde_json::from_str::<Value>(raw) {
        Ok(v) => scene_from_value(&v),
        Err(e) => Err(vec![Violation::NotParseable { reason: e.to_string() }]),
    }
}

/// Same as [`parse_scene_json`] for an already-decoded JSON value.
pub fn scene_from_value(value: &Value) -> Result<SceneGraph, Vec<Violation>> {
    let Some(top) = value.as_object() else {
        return Err(vec![Violation::NotParseable { reason: "top level is not a JSON object".into() }]);
    };
    let mut violations = Vec::new();
    for key in top.keys().filter(|k| !matches!(k.as_str(), "objects" | "relations")) {
        log::warn!("ignoring unknown scene field `{key}`");
    }

    let mut objects = Vec::new();
    match top.get("objects") {
        None => violations.push(Violation::NotParseable { reason: "missing `objects` array".into() }),
        Some(Value::Array(items)) => {
            for (i, item) in items.iter().enumerate() {
                if let Some(node) = object_from_value(i, item, &mut violations) {
                    objects.push(node);
                }
            }
        }
        Some(_) => violations.push(Violation::NotParseable { reason: "`objects` is not an array".into() }),
    }

    let mut relations = Vec::new();
    let mut relation_slots = Vec::new();
    match top.get("relations") {
        None => violations.push(Violation::NotParseable { reason: "missing `relations` array".into() }),
        Some(Value::Array(items)) => {
            for (r, item) in items.iter().enumerate() {
                match relation_from_value(item) {
                    Ok(t) => {
                        relation_slots.push(r);
                        relations.push(t);
                    }
                    Err(reason) => violations.push(Violation::MalformedRelation { relation: r, reason }),
                }
            }
        }
        Some(_) => violations.push(Violation::NotParseable { reason: "`relations` is not an array".into() }),
    }

    // Ids from objects whose own fields failed still count as declared, so a
    // relation pointing at them is not additionally reported as dangling.
    let mut declared: HashSet<&str> = HashSet::new();
    let mut dup_ids: BTreeSet<String> = BTreeSet::new();
    if let Some(Value::Array(items)) = top.get("objects") {
        for item in items {
            if let Some(id) = item.get("id").and_then(Value::as_str) {
                if !declared.insert(id) {
                    dup_ids.insert(id.to_string());
                }
            }
        }
    }
    violations.extend(dup_ids.into_iter().map(|id| Violation::DuplicateId { id }));
    for v in relation_violations(&relations, &declared, None) {
        // Re-index to positions in the input array.
        violations.push(match v {
            Violation::SelfRelation { relation } => Violation::SelfRelation { relation: relation_slots[relation] },
            Violation::DanglingRelationEndpoint { relation, id } => {
                Violation::DanglingRelationEndpoint { relation: relation_slots[relation], id }
            }
            Violation::MalformedRelation { relation, reason } => {
                Violation::MalformedRelation { relation: relation_slots[relation], reason }
            }
            other => other,
        });
    }

    if violations.is_empty() {
        Ok(SceneGraph::new(objects, relations))
    } else {
        Err(violations)
    }
}

fn object_from_value(i: usize, item: &Value, violations: &mut Vec<Violation>) -> Option<ObjectNode> {
    let Some(map) = item.as_object() else {
        violations.push(Violation::NotParseable { reason: format!("object {i} is not a JSON object") });
        return None;
    };
    for key in map.keys().filter(|k| !matches!(k.as_str(), "id" | "label" | "bbox")) {
        log::warn!("object {i}: ignoring unknown field `{key}`");
    }
    let before = violations.len();
    let mut text_field = |name: &str| -> Option<String> {
        match map.get(name) {
            None | Some(Value::Null) => {
                violations.push(Violation::MissingField { object: i, field: name.into() });
                None
            }
            Some(Value::String(s)) if s.trim().is_empty() => {
                violations.push(Violation::EmptyField { object: i, field: name.into() });
                None
            }
            Some(Value::String(s)) => Some(s.clone()),
            Some(_) => {
                violations.push(Violation::MissingField { object: i, field: name.into() });
                None
            }
        }
    };
    let id = text_field("id");
    let label = text_field("label");
    let bbox = match map.get("bbox") {
        None | Some(Value::Null) => {
            violations.push(Violation::MissingField { object: i, field: "bbox".into() });
            None
        }
        Some(v) => match bbox_from_value(v) {
            Ok(b) => Some(b),
            Err(issue) => {
                violations.push(Violation::BadBBox { object: i, issue });
                None
            }
        },
    };
    if violations.len() != before {
        return None;
    }
    Some(ObjectNode { id: id?, label: label?, bbox: bbox? })
}

fn bbox_from_value(v: &Value) -> Result<BBox, BBoxIssue> {
    let arr = v.as_array().ok_or(BBoxIssue::NotAnArray)?;
    if arr.len() != 4 {
        return Err(BBoxIssue::WrongArity);
    }
    let mut c = [0.0; 4];
    for (slot, x) in c.iter_mut().zip(arr) {
        *slot = x.as_f64().ok_or(BBoxIssue::NotANumber)?;
    }
    let b = BBox::new(c[0], c[1], c[2], c[3]);
    match b.check(None) {
        Some(issue) => Err(issue),
        None => Ok(b),
    }
}

fn relation_from_value(item: &Value) -> Result<RelationTriplet, String> {
    let arr = item.as_array().ok_or_else(|| "relation is not a 3-element array".to_string())?;
    if arr.len() != 3 {
        return Err(format!("relation has {} elements, expected 3", arr.len()));
    }
    let text = |k: usize| arr[k].as_str().map(str::to_string).ok_or_else(|| format!("element {k} is not a string"));
    let triplet = RelationTriplet::new(text(0)?, text(1)?, text(2)?);
    if triplet.predicate.trim().is_empty() {
        return Err("empty predicate".into());
    }
    Ok(triplet)
}

#[derive(Debug, thiserror::Error)]
pub enum SerializeError {
    #[error("graph is invalid: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    InvalidGraph(Vec<Violation>),
}

/// Canonical JSON: objects sorted by id, relations sorted, fixed field order.
pub fn serialize_scene(g: &SceneGraph) -> Result<String, SerializeError> {
    let violations = validate_graph(&SceneGraph { image_size: None, ..g.clone() }, None);
    if !violations.is_empty() {
        return Err(SerializeError::InvalidGraph(violations));
    }
    Ok(serde_json::to_string(g).expect("scene serialization is infallible"))
}

struct WireObject<'a>(&'a ObjectNode);

impl Serialize for WireObject<'_> {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut st = s.serialize_struct("Object", 3)?;
        st.serialize_field("id", &self.0.id)?;
        st.serialize_field("label", &self.0.label)?;
        st.serialize_field("bbox", &self.0.bbox.as_array())?;
        st.end()
    }
}

/// Serializes in canonical order without validating.
impl Serialize for SceneGraph {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let c = self.canonical();
        let objects: Vec<WireObject<'_>> = c.objects.iter().map(WireObject).collect();
        let relations: Vec<[&str; 3]> = c
            .relations
            .iter()
            .map(|r| [r.subject_id.as_str(), r.predicate.as_str(), r.object_id.as_str()])
            .collect();
        let mut st = s.serialize_struct("SceneGraph", 2)?;
        st.serialize_field("objects", &objects)?;
        st.serialize_field("relations", &relations)?;
        st.end()
    }
}

impl<'de> Deserialize<'de> for SceneGraph {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let value = Value::deserialize(d)?;
        scene_from_value(&value).map_err(|vs| {
            D::Error::custom(vs.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))
        })
    }
}
