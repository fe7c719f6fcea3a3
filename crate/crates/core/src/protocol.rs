//! The `<think>…</think><answer>[…]</answer>` response grammar.
//!
//! The answer body is a JSON array with one object per target instance:
//!
//! ```text
//! [{"bbox":[x1,y1,x2,y2],"points":[[x,y],[x,y]]}]
//! ```
//!
//! `"neg_points"` is present only under [`PromptMode::BboxPos2Neg2`]. All
//! coordinates are integer pixel indices on the schema canvas; an empty array
//! is the rejection answer. Validation order is fixed: tags, then JSON
//! well-formedness, then schema composition, then canvas bounds.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::mask::{BBox, PointPx, Polarity};

const THINK_OPEN: &str = "<think>";
const THINK_CLOSE: &str = "</think>";
const ANSWER_OPEN: &str = "<answer>";
const ANSWER_CLOSE: &str = "</answer>";

/// Which prompt elements each instance carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    BboxOnly,
    #[serde(rename = "pos_points_2")]
    PosPoints2,
    #[default]
    BboxPos2,
    BboxPos4,
    BboxPos2Neg2,
}

impl PromptMode {
    pub const ALL: [PromptMode; 5] = [
        PromptMode::BboxOnly,
        PromptMode::PosPoints2,
        PromptMode::BboxPos2,
        PromptMode::BboxPos4,
        PromptMode::BboxPos2Neg2,
    ];

    pub fn has_box(self) -> bool {
        !matches!(self, PromptMode::PosPoints2)
    }

    pub fn positive_points(self) -> usize {
        match self {
            PromptMode::BboxOnly => 0,
            PromptMode::BboxPos4 => 4,
            _ => 2,
        }
    }

    pub fn negative_points(self) -> usize {
        match self {
            PromptMode::BboxPos2Neg2 => 2,
            _ => 0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PromptMode::BboxOnly => "bbox_only",
            PromptMode::PosPoints2 => "pos_points_2",
            PromptMode::BboxPos2 => "bbox_pos2",
            PromptMode::BboxPos4 => "bbox_pos4",
            PromptMode::BboxPos2Neg2 => "bbox_pos2_neg2",
        }
    }
}

impl fmt::Display for PromptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PromptMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown prompt schema '{s}'")))
    }
}

/// Prompt mode plus the canvas coordinates are validated against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptSchema {
    pub mode: PromptMode,
    pub width: usize,
    pub height: usize,
}

impl PromptSchema {
    pub const SYNTHETIC_CANVAS: usize = 256;
    pub const BRIDGE_CANVAS: usize = 840;

    pub fn new(mode: PromptMode, width: usize, height: usize) -> Self {
        PromptSchema {
            mode,
            width,
            height,
        }
    }

    pub fn synthetic(mode: PromptMode) -> Self {
        Self::new(mode, Self::SYNTHETIC_CANVAS, Self::SYNTHETIC_CANVAS)
    }

    pub fn bridge(mode: PromptMode) -> Self {
        Self::new(mode, Self::BRIDGE_CANVAS, Self::BRIDGE_CANVAS)
    }

    /// Checks composition first, then canvas bounds.
    pub fn validate(&self, p: &InstancePrompt) -> std::result::Result<(), FormatError> {
        self.check_composition(p)?;
        self.check_canvas(p)
    }

    fn check_composition(&self, p: &InstancePrompt) -> std::result::Result<(), FormatError> {
        let mode = self.mode;
        match (&p.bbox, mode.has_box()) {
            (None, true) => return Err(FormatError::schema(format!("{mode} requires a bbox"))),
            (Some(_), false) => return Err(FormatError::schema(format!("{mode} forbids a bbox"))),
            _ => {}
        }
        if let Some(b) = &p.bbox {
            if b.x1 > b.x2 || b.y1 > b.y2 {
                return Err(FormatError::schema(format!(
                    "bbox corners out of order: [{},{},{},{}]",
                    b.x1, b.y1, b.x2, b.y2
                )));
            }
        }
        let pos = p.positives().count();
        let neg = p.negatives().count();
        if pos != mode.positive_points() || neg != mode.negative_points() {
            return Err(FormatError::schema(format!(
                "{mode} requires {} positive and {} negative points, got {pos} and {neg}",
                mode.positive_points(),
                mode.negative_points()
            )));
        }
        if p.points[..pos]
            .iter()
            .any(|q| q.polarity != Polarity::Positive)
        {
            return Err(FormatError::schema(
                "positive points must precede negative points",
            ));
        }
        Ok(())
    }

    fn check_canvas(&self, p: &InstancePrompt) -> std::result::Result<(), FormatError> {
        if let Some(b) = &p.bbox {
            if b.x2 >= self.width || b.y2 >= self.height {
                return Err(FormatError::new(
                    FormatErrorKind::OutOfCanvas,
                    format!(
                        "bbox [{},{},{},{}] exceeds {}x{} canvas",
                        b.x1, b.y1, b.x2, b.y2, self.width, self.height
                    ),
                ));
            }
        }
        if let Some(q) = p
            .points
            .iter()
            .find(|q| !q.in_canvas(self.width, self.height))
        {
            return Err(FormatError::new(
                FormatErrorKind::OutOfCanvas,
                format!(
                    "point ({},{}) outside {}x{} canvas",
                    q.x, q.y, self.width, self.height
                ),
            ));
        }
        Ok(())
    }
}

/// Geometric prompt for one target instance. Positive points come first.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InstancePrompt {
    pub bbox: Option<BBox>,
    pub points: Vec<PointPx>,
}

impl InstancePrompt {
    pub fn new(
        bbox: Option<BBox>,
        positives: &[(usize, usize)],
        negatives: &[(usize, usize)],
    ) -> Self {
        let points = positives
            .iter()
            .map(|&(x, y)| PointPx::positive(x, y))
            .chain(negatives.iter().map(|&(x, y)| PointPx::negative(x, y)))
            .collect();
        InstancePrompt { bbox, points }
    }

    pub fn positives(&self) -> impl Iterator<Item = &PointPx> {
        self.points
            .iter()
            .filter(|p| p.polarity == Polarity::Positive)
    }

    pub fn negatives(&self) -> impl Iterator<Item = &PointPx> {
        self.points
            .iter()
            .filter(|p| p.polarity == Polarity::Negative)
    }
}

/// The policy's action: zero or more instance prompts. Empty means "no target".
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptSet {
    pub instances: Vec<InstancePrompt>,
}

impl PromptSet {
    pub fn new(instances: Vec<InstancePrompt>) -> Self {
        PromptSet { instances }
    }

    pub fn empty() -> Self {
        PromptSet::default()
    }

    pub fn is_rejection(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FormatErrorKind {
    MissingTags,
    BadJson,
    SchemaViolation,
    OutOfCanvas,
}

impl FormatErrorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FormatErrorKind::MissingTags => "missing_tags",
            FormatErrorKind::BadJson => "bad_json",
            FormatErrorKind::SchemaViolation => "schema_violation",
            FormatErrorKind::OutOfCanvas => "out_of_canvas",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormatError {
    pub kind: FormatErrorKind,
    pub detail: String,
}

impl FormatError {
    pub fn new(kind: FormatErrorKind, detail: impl Into<String>) -> Self {
        FormatError {
            kind,
            detail: detail.into(),
        }
    }

    fn tags(detail: impl Into<String>) -> Self {
        Self::new(FormatErrorKind::MissingTags, detail)
    }

    fn schema(detail: impl Into<String>) -> Self {
        Self::new(FormatErrorKind::SchemaViolation, detail)
    }
}

impl fmt::Display for FormatError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind.as_str(), self.detail)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedResponse {
    pub prompts: PromptSet,
    pub think: String,
}

pub type ParseResult = std::result::Result<ParsedResponse, FormatError>;

fn contains_any_tag(s: &str) -> bool {
    [THINK_OPEN, THINK_CLOSE, ANSWER_OPEN, ANSWER_CLOSE]
        .iter()
        .any(|t| s.contains(t))
}

/// Splits a response into `(think body, answer body)`.
fn split_tags(text: &str) -> std::result::Result<(&str, &str), FormatError> {
    let rest = text.trim_start();
    let rest = rest
        .strip_prefix(THINK_OPEN)
        .ok_or_else(|| FormatError::tags("response must begin with <think>"))?;
    let close = rest
        .find(THINK_CLOSE)
        .ok_or_else(|| FormatError::tags("unterminated <think> block"))?;
    let think = &rest[..close];
    if contains_any_tag(think) {
        return Err(FormatError::tags("nested or repeated tag inside <think>"));
    }
    let rest = rest[close + THINK_CLOSE.len()..].trim_start();
    let rest = rest
        .strip_prefix(ANSWER_OPEN)
        .ok_or_else(|| FormatError::tags("<answer> must follow </think>"))?;
    let close = rest
        .find(ANSWER_CLOSE)
        .ok_or_else(|| FormatError::tags("unterminated <answer> block"))?;
    let answer = &rest[..close];
    if contains_any_tag(answer) {
        return Err(FormatError::tags("nested or repeated tag inside <answer>"));
    }
    let tail = &rest[close + ANSWER_CLOSE.len()..];
    if tail.contains(ANSWER_OPEN) || tail.contains(THINK_OPEN) {
        return Err(FormatError::tags("more than one <think>/<answer> block"));
    }
    Ok((think, answer))
}

fn as_coord(v: &Value, what: &str) -> std::result::Result<i128, FormatError> {
    match v {
        Value::Number(n) => n
            .as_i64()
            .map(i128::from)
            .or_else(|| n.as_u64().map(i128::from))
            .ok_or_else(|| FormatError::schema(format!("{what} must be an integer, got {n}"))),
        other => Err(FormatError::schema(format!(
            "{what} must be an integer, got {other}"
        ))),
    }
}

fn as_point(v: &Value, what: &str) -> std::result::Result<(i128, i128), FormatError> {
    match v.as_array().map(Vec::as_slice) {
        Some([x, y]) => Ok((as_coord(x, what)?, as_coord(y, what)?)),
        _ => Err(FormatError::schema(format!(
            "{what} must be an [x, y] pair"
        ))),
    }
}

fn point_list(v: &Value, key: &str) -> std::result::Result<Vec<(i128, i128)>, FormatError> {
    v.as_array()
        .ok_or_else(|| FormatError::schema(format!("\"{key}\" must be an array")))?
        .iter()
        .map(|p| as_point(p, key))
        .collect()
}

/// Coordinates as parsed, before canvas checks. Negative values survive until
/// the bounds pass so they are reported as `out_of_canvas`.
struct RawInstance {
    bbox: Option<[i128; 4]>,
    positives: Vec<(i128, i128)>,
    negatives: Vec<(i128, i128)>,
}

fn parse_instance(v: &Value, mode: PromptMode) -> std::result::Result<RawInstance, FormatError> {
    let obj = v
        .as_object()
        .ok_or_else(|| FormatError::schema("each answer element must be an object"))?;
    if let Some(k) = obj
        .keys()
        .find(|k| !matches!(k.as_str(), "bbox" | "points" | "neg_points"))
    {
        return Err(FormatError::schema(format!("unknown key \"{k}\"")));
    }
    let bbox = match obj.get("bbox") {
        None => None,
        Some(b) => match b.as_array().map(Vec::as_slice) {
            Some([a, b, c, d]) => Some([
                as_coord(a, "bbox")?,
                as_coord(b, "bbox")?,
                as_coord(c, "bbox")?,
                as_coord(d, "bbox")?,
            ]),
            _ => return Err(FormatError::schema("\"bbox\" must be [x1, y1, x2, y2]")),
        },
    };
    let positives = match obj.get("points") {
        Some(p) => point_list(p, "points")?,
        None if mode.positive_points() == 0 => Vec::new(),
        None => return Err(FormatError::schema(format!("{mode} requires \"points\""))),
    };
    let negatives = match obj.get("neg_points") {
        Some(_) if mode.negative_points() == 0 => {
            return Err(FormatError::schema(format!(
                "{mode} forbids \"neg_points\""
            )))
        }
        Some(p) => point_list(p, "neg_points")?,
        None if mode.negative_points() > 0 => {
            return Err(FormatError::schema(format!(
                "{mode} requires \"neg_points\""
            )))
        }
        None => Vec::new(),
    };
    if mode.has_box() != bbox.is_some() {
        return Err(FormatError::schema(if mode.has_box() {
            format!("{mode} requires a bbox")
        } else {
            format!("{mode} forbids a bbox")
        }));
    }
    if let Some([x1, y1, x2, y2]) = bbox {
        if x1 > x2 || y1 > y2 {
            return Err(FormatError::schema(format!(
                "bbox corners out of order: [{x1},{y1},{x2},{y2}]"
            )));
        }
    }
    if positives.len() != mode.positive_points() || negatives.len() != mode.negative_points() {
        return Err(FormatError::schema(format!(
            "{mode} requires {} positive and {} negative points, got {} and {}",
            mode.positive_points(),
            mode.negative_points(),
            positives.len(),
            negatives.len()
        )));
    }
    Ok(RawInstance {
        bbox,
        positives,
        negatives,
    })
}

fn to_canvas(
    raw: RawInstance,
    schema: &PromptSchema,
) -> std::result::Result<InstancePrompt, FormatError> {
    let (w, h) = (schema.width as i128, schema.height as i128);
    let oob = |what: String| FormatError::new(FormatErrorKind::OutOfCanvas, what);
    let coord = |x: i128, y: i128| -> std::result::Result<(usize, usize), FormatError> {
        if (0..w).contains(&x) && (0..h).contains(&y) {
            Ok((x as usize, y as usize))
        } else {
            Err(oob(format!("({x},{y}) outside {w}x{h} canvas")))
        }
    };
    let bbox = match raw.bbox {
        Some([x1, y1, x2, y2]) => {
            let (x1, y1) = coord(x1, y1)?;
            let (x2, y2) = coord(x2, y2)?;
            Some(BBox::new(x1, y1, x2, y2))
        }
        None => None,
    };
    let positives = raw
        .positives
        .into_iter()
        .map(|(x, y)| coord(x, y))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let negatives = raw
        .negatives
        .into_iter()
        .map(|(x, y)| coord(x, y))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(InstancePrompt::new(bbox, &positives, &negatives))
}

/// Parses a policy response under `schema`. Never panics.
pub fn parse_response(text: &str, schema: &PromptSchema) -> ParseResult {
    let (think, answer) = split_tags(text)?;
    let value: Value = serde_json::from_str(answer)
        .map_err(|e| FormatError::new(FormatErrorKind::BadJson, e.to_string()))?;
    let items = value
        .as_array()
        .ok_or_else(|| FormatError::schema("answer must be a JSON array"))?;
    let raw = items
        .iter()
        .map(|v| parse_instance(v, schema.mode))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let instances = raw
        .into_iter()
        .map(|r| to_canvas(r, schema))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(ParsedResponse {
        prompts: PromptSet::new(instances),
        think: think.to_string(),
    })
}

#[derive(Serialize)]
struct WireInstance {
    #[serde(skip_serializing_if = "Option::is_none")]
    bbox: Option<[usize; 4]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    points: Option<Vec<[usize; 2]>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    neg_points: Option<Vec<[usize; 2]>>,
}

/// The compact JSON array carried inside `<answer>`.
pub fn answer_json(p: &PromptSet, schema: &PromptSchema) -> Result<String> {
    let mut wire = Vec::with_capacity(p.len());
    for inst in &p.instances {
        schema
            .validate(inst)
            .map_err(|e| Error::Schema(e.to_string()))?;
        let pos: Vec<[usize; 2]> = inst.positives().map(|q| [q.x, q.y]).collect();
        let neg: Vec<[usize; 2]> = inst.negatives().map(|q| [q.x, q.y]).collect();
        wire.push(WireInstance {
            bbox: inst.bbox.map(|b| [b.x1, b.y1, b.x2, b.y2]),
            points: (schema.mode.positive_points() > 0).then_some(pos),
            neg_points: (schema.mode.negative_points() > 0).then_some(neg),
        });
    }
    serde_json::to_string(&wire).map_err(|e| Error::Schema(e.to_string()))
}

/// Inverse of [`parse_response`].
pub fn serialize_prompt_set(p: &PromptSet, think: &str, schema: &PromptSchema) -> Result<String> {
    if contains_any_tag(think) {
        return Err(Error::Schema(
            "think text may not contain protocol tags".into(),
        ));
    }
    Ok(format!(
        "{THINK_OPEN}{think}{THINK_CLOSE}{ANSWER_OPEN}{}{ANSWER_CLOSE}",
        answer_json(p, schema)?
    ))
}

/// 1 for a parseable response, 0 otherwise.
pub fn format_reward(r: &ParseResult) -> u8 {
    u8::from(r.is_ok())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn schema() -> PromptSchema {
        PromptSchema::synthetic(PromptMode::BboxPos2)
    }

    #[test]
    fn mode_names_agree_across_serde_and_cli() {
        for m in PromptMode::ALL {
            assert_eq!(
                serde_json::to_string(&m).unwrap(),
                format!("\"{}\"", m.as_str())
            );
            assert_eq!(m.as_str().parse::<PromptMode>().unwrap(), m);
        }
    }

    fn kind(text: &str, s: &PromptSchema) -> FormatErrorKind {
        parse_response(text, s).unwrap_err().kind
    }

    #[test]
    fn parses_single_instance() {
        let text = r#"<think>t</think><answer>[{"bbox":[10,20,110,220],"points":[[60,120],[40,80]]}]</answer>"#;
        let r = parse_response(text, &schema()).unwrap();
        assert_eq!(r.think, "t");
        assert_eq!(r.prompts.len(), 1);
        let inst = &r.prompts.instances[0];
        assert_eq!(inst.bbox, Some(BBox::new(10, 20, 110, 220)));
        assert_eq!(
            inst.points,
            vec![PointPx::positive(60, 120), PointPx::positive(40, 80)]
        );
    }

    #[test]
    fn parses_rejection() {
        let r = parse_response(
            "<think>no turbines here</think><answer>[]</answer>",
            &schema(),
        )
        .unwrap();
        assert!(r.prompts.is_rejection());
        assert_eq!(format_reward(&Ok(r)), 1);
    }

    #[test]
    fn missing_think_is_checked_before_json() {
        assert_eq!(
            kind(r#"<answer>[{"bbox":[1,2,3]}]</answer>"#, &schema()),
            FormatErrorKind::MissingTags
        );
        assert_eq!(
            kind("<answer>[]</answer>", &schema()),
            FormatErrorKind::MissingTags
        );
    }

    #[test]
    fn error_kinds_follow_rule_order() {
        let s = schema();
        assert_eq!(
            kind("<think></think><answer>[{</answer>", &s),
            FormatErrorKind::BadJson
        );
        assert_eq!(
            kind(r#"<think></think><answer>{"bbox":1}</answer>"#, &s),
            FormatErrorKind::SchemaViolation
        );
        assert_eq!(
            kind(
                r#"<think></think><answer>[{"bbox":[1,2,3,4],"points":[[1,2]]}]</answer>"#,
                &s
            ),
            FormatErrorKind::SchemaViolation
        );
        assert_eq!(
            kind(
                r#"<think></think><answer>[{"bbox":[1,2,3,4.0],"points":[[1,2],[2,3]]}]</answer>"#,
                &s
            ),
            FormatErrorKind::SchemaViolation
        );
        assert_eq!(
            kind(
                r#"<think></think><answer>[{"bbox":[1,2,300,4],"points":[[1,2],[2,3]]}]</answer>"#,
                &s
            ),
            FormatErrorKind::OutOfCanvas
        );
        assert_eq!(
            kind(
                r#"<think></think><answer>[{"bbox":[-1,2,3,4],"points":[[1,2],[2,3]]}]</answer>"#,
                &s
            ),
            FormatErrorKind::OutOfCanvas
        );
        // schema problems in a later instance outrank canvas problems in an earlier one
        assert_eq!(
            kind(
                r#"<think></think><answer>[{"bbox":[1,2,999,4],"points":[[1,2],[2,3]]},{"bbox":[1,2,3,4]}]</answer>"#,
                &s
            ),
            FormatErrorKind::SchemaViolation
        );
    }

    #[test]
    fn tag_layout_rules() {
        let s = schema();
        assert!(parse_response(
            "  <think>a</think>\n <answer> [] </answer> trailing junk",
            &s
        )
        .is_ok());
        assert_eq!(
            kind("x<think>a</think><answer>[]</answer>", &s),
            FormatErrorKind::MissingTags
        );
        assert_eq!(
            kind("<THINK>a</THINK><answer>[]</answer>", &s),
            FormatErrorKind::MissingTags
        );
        assert_eq!(
            kind("<think>a</think>x<answer>[]</answer>", &s),
            FormatErrorKind::MissingTags
        );
        assert_eq!(
            kind("<think>a</think><answer>[]</answer><answer>[]</answer>", &s),
            FormatErrorKind::MissingTags
        );
        assert_eq!(
            kind("<think>a<think></think><answer>[]</answer>", &s),
            FormatErrorKind::MissingTags
        );
    }

    #[test]
    fn mode_specific_keys() {
        let neg = PromptSchema::synthetic(PromptMode::BboxPos2Neg2);
        let text = r#"<think></think><answer>[{"bbox":[0,0,9,9],"points":[[1,1],[2,2]],"neg_points":[[0,0],[9,9]]}]</answer>"#;
        let r = parse_response(text, &neg).unwrap();
        assert_eq!(r.prompts.instances[0].negatives().count(), 2);
        assert_eq!(kind(text, &schema()), FormatErrorKind::SchemaViolation);

        let only = PromptSchema::synthetic(PromptMode::BboxOnly);
        assert!(parse_response(
            r#"<think></think><answer>[{"bbox":[0,0,9,9]}]</answer>"#,
            &only
        )
        .is_ok());
        let pts = PromptSchema::synthetic(PromptMode::PosPoints2);
        assert_eq!(
            kind(
                r#"<think></think><answer>[{"bbox":[0,0,9,9],"points":[[1,1],[2,2]]}]</answer>"#,
                &pts
            ),
            FormatErrorKind::SchemaViolation
        );
        assert!(parse_response(
            r#"<think></think><answer>[{"points":[[1,1],[2,2]]}]</answer>"#,
            &pts
        )
        .is_ok());
    }

    #[test]
    fn serialize_examples() {
        let s = schema();
        assert_eq!(
            serialize_prompt_set(&PromptSet::empty(), "none", &s).unwrap(),
            "<think>none</think><answer>[]</answer>"
        );
        let a = InstancePrompt::new(Some(BBox::new(1, 2, 30, 40)), &[(5, 6), (7, 8)], &[]);
        let b = InstancePrompt::new(
            Some(BBox::new(100, 100, 120, 130)),
            &[(110, 110), (111, 111)],
            &[],
        );
        let set = PromptSet::new(vec![a.clone(), b]);
        let text = serialize_prompt_set(&set, "two", &s).unwrap();
        let json = text
            .trim_start_matches("<think>two</think><answer>")
            .trim_end_matches("</answer>");
        let v: Value = serde_json::from_str(json).unwrap();
        assert_eq!(v.as_array().unwrap().len(), 2);
        assert_eq!(parse_response(&text, &s).unwrap().prompts, set);

        let bad = PromptSet::new(vec![InstancePrompt::new(None, &[(1, 1)], &[])]);
        assert!(matches!(
            serialize_prompt_set(&bad, "", &s),
            Err(Error::Schema(_))
        ));
        assert!(serialize_prompt_set(&PromptSet::empty(), "<answer>", &s).is_err());
    }

    #[test]
    fn format_reward_values() {
        assert_eq!(
            format_reward(&Err(FormatError::new(FormatErrorKind::BadJson, ""))),
            0
        );
        assert_eq!(
            format_reward(&Err(FormatError::new(FormatErrorKind::OutOfCanvas, ""))),
            0
        );
    }

    proptest! {
        #[test]
        fn never_panics(s in ".{0,200}") {
            let r = parse_response(&s, &schema());
            prop_assert!(format_reward(&r) <= 1);
        }

        #[test]
        fn never_panics_near_grammar(body in "[\\[\\]{}\",:0-9a-z_ -]{0,80}") {
            let text = format!("<think>x</think><answer>{body}</answer>");
            let _ = parse_response(&text, &schema());
        }
    }
}
