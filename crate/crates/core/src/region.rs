//! Axis-aligned query regions in physical units.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::field::domain::{Bounds, DomainSpec, SPATIAL_AXIS_NAMES};
use crate::range_stats::AxisSpan;

/// A single axis fixed at a value or ranged uniformly over `[lo, hi]`.
/// Serialized as a number or a `[lo, hi]` pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AxisQuery {
    Point(f64),
    Range(f64, f64),
}

impl AxisQuery {
    pub fn bounds(&self) -> (f64, f64) {
        match *self {
            AxisQuery::Point(v) => (v, v),
            AxisQuery::Range(lo, hi) => (lo, hi),
        }
    }

    pub fn is_range(&self) -> bool {
        matches!(self, AxisQuery::Range(..))
    }

    fn parse(v: &Value, axis: &str) -> Result<Self> {
        match v {
            Value::Number(n) => Ok(AxisQuery::Point(n.as_f64().expect("finite json number"))),
            Value::Array(a) if a.len() == 2 => {
                let lo = a[0].as_f64();
                let hi = a[1].as_f64();
                match (lo, hi) {
                    (Some(lo), Some(hi)) => Ok(AxisQuery::Range(lo, hi)),
                    _ => Err(Error::Region(format!("axis `{axis}`: bounds must be numbers"))),
                }
            }
            _ => Err(Error::Region(format!("axis `{axis}`: expected a number or [lo, hi]"))),
        }
    }

    /// Normalized span, checking the physical extent against `bounds`.
    fn normalize(&self, bounds: Bounds, axis: &str) -> Result<AxisSpan> {
        let (lo, hi) = self.bounds();
        if !(lo.is_finite() && hi.is_finite()) {
            return Err(Error::Region(format!("axis `{axis}`: non-finite bound")));
        }
        if lo > hi {
            return Err(Error::Region(format!("axis `{axis}`: inverted bounds [{lo}, {hi}]")));
        }
        let tol = 1e-12 * bounds.width().max(bounds.max.abs()).max(bounds.min.abs());
        for v in [lo, hi] {
            if v < bounds.min - tol || v > bounds.max + tol {
                return Err(Error::Domain { axis: axis.to_string(), value: bounds.normalize(v) });
            }
        }
        let n = |v: f64| bounds.normalize(v).clamp(-1.0, 1.0);
        Ok(match self {
            AxisQuery::Point(v) => AxisSpan::Point(n(*v)),
            AxisQuery::Range(..) => AxisSpan::new(n(lo), n(hi)),
        })
    }
}

/// A box over the spatial axes and the simulation parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryRegion {
    pub spatial: [AxisQuery; 3],
    pub params: Vec<AxisQuery>,
}

/// Parameter box parsed from `{param: {...}, spatial?: {...}}`; the spatial
/// part is absent unless given.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxSpec {
    pub params: Vec<AxisQuery>,
    pub spatial: Option<[AxisQuery; 3]>,
}

impl BoxSpec {
    /// Parses a box over the domain's axes. Parameters not listed span
    /// their full domain range.
    pub fn from_json(v: &Value, domain: &DomainSpec) -> Result<Self> {
        let obj = v.as_object().ok_or_else(|| Error::Region("box must be a JSON object".into()))?;
        for key in obj.keys() {
            if key != "param" && key != "spatial" {
                return Err(Error::Region(format!("unknown box key `{key}`")));
            }
        }
        let mut params: Vec<AxisQuery> = domain.params.iter().map(|a| AxisQuery::Range(a.min, a.max)).collect();
        if let Some(p) = obj.get("param") {
            let p = p.as_object().ok_or_else(|| Error::Region("`param` must be an object".into()))?;
            for (name, q) in p {
                let i = domain.param_index(name).ok_or_else(|| Error::Region(format!("unknown parameter `{name}`")))?;
                params[i] = AxisQuery::parse(q, name)?;
            }
        }
        let spatial = match obj.get("spatial") {
            None => None,
            Some(s) => {
                let s = s.as_object().ok_or_else(|| Error::Region("`spatial` must be an object".into()))?;
                let mut out: [AxisQuery; 3] = std::array::from_fn(|a| {
                    AxisQuery::Range(domain.spatial[a].min, domain.spatial[a].max)
                });
                for (name, q) in s {
                    let a = SPATIAL_AXIS_NAMES
                        .iter()
                        .position(|n| n == name)
                        .ok_or_else(|| Error::Region(format!("unknown spatial axis `{name}`")))?;
                    out[a] = AxisQuery::parse(q, name)?;
                }
                Some(out)
            }
        };
        let spec = Self { params, spatial };
        spec.validate(domain)?;
        Ok(spec)
    }

    pub fn validate(&self, domain: &DomainSpec) -> Result<()> {
        if self.params.len() != domain.n_params() {
            return Err(Error::Shape(format!("box has {} parameters, domain has {}", self.params.len(), domain.n_params())));
        }
        for (q, a) in self.params.iter().zip(&domain.params) {
            q.normalize(a.bounds(), &a.name)?;
        }
        if let Some(s) = &self.spatial {
            for k in 0..3 {
                s[k].normalize(domain.spatial[k], SPATIAL_AXIS_NAMES[k])?;
            }
        }
        Ok(())
    }

    /// Normalized parameter spans.
    pub fn param_spans(&self, domain: &DomainSpec) -> Result<Vec<AxisSpan>> {
        self.params
            .iter()
            .zip(&domain.params)
            .map(|(q, a)| q.normalize(a.bounds(), &a.name))
            .collect()
    }

    pub fn to_json(&self, domain: &DomainSpec) -> Value {
        let q = |a: &AxisQuery| match *a {
            AxisQuery::Point(v) => Value::from(v),
            AxisQuery::Range(lo, hi) => Value::from(vec![lo, hi]),
        };
        let mut param = serde_json::Map::new();
        for (a, p) in domain.params.iter().zip(&self.params) {
            param.insert(a.name.clone(), q(p));
        }
        let mut out = serde_json::Map::new();
        out.insert("param".into(), Value::Object(param));
        if let Some(s) = &self.spatial {
            let mut sp = serde_json::Map::new();
            for k in 0..3 {
                sp.insert(SPATIAL_AXIS_NAMES[k].into(), q(&s[k]));
            }
            out.insert("spatial".into(), Value::Object(sp));
        }
        Value::Object(out)
    }
}

impl QueryRegion {
    pub fn point(x: [f64; 3], p: &[f64]) -> Self {
        Self { spatial: x.map(AxisQuery::Point), params: p.iter().map(|&v| AxisQuery::Point(v)).collect() }
    }

    /// Region at a spatial point with parameters ranged over `params`.
    pub fn at(x: [f64; 3], params: Vec<AxisQuery>) -> Self {
        Self { spatial: x.map(AxisQuery::Point), params }
    }

    /// Normalized spans for every model input axis: x, y, z, then parameters.
    pub fn spans(&self, domain: &DomainSpec) -> Result<Vec<AxisSpan>> {
        if self.params.len() != domain.n_params() {
            return Err(Error::Shape(format!(
                "region has {} parameters, domain has {}",
                self.params.len(),
                domain.n_params()
            )));
        }
        let mut out = Vec::with_capacity(3 + self.params.len());
        for k in 0..3 {
            out.push(self.spatial[k].normalize(domain.spatial[k], SPATIAL_AXIS_NAMES[k])?);
        }
        for (q, a) in self.params.iter().zip(&domain.params) {
            out.push(q.normalize(a.bounds(), &a.name)?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::domain::ParamAxis;

    fn domain() -> DomainSpec {
        DomainSpec {
            spatial: [Bounds::new(0.0, 2.0); 3],
            params: vec![
                ParamAxis { name: "OmM".into(), min: 0.12, max: 0.155 },
                ParamAxis { name: "h".into(), min: 0.55, max: 0.85 },
            ],
            value_min: 0.0,
            value_max: 1.0,
        }
    }

    #[test]
    fn parses_points_and_ranges() {
        let d = domain();
        let v: Value = serde_json::from_str(r#"{"param": {"h": 0.7}, "spatial": {"x": [0.5, 1.5]}}"#).unwrap();
        let b = BoxSpec::from_json(&v, &d).unwrap();
        assert_eq!(b.params[0], AxisQuery::Range(0.12, 0.155));
        assert_eq!(b.params[1], AxisQuery::Point(0.7));
        let s = b.spatial.unwrap();
        assert_eq!(s[0], AxisQuery::Range(0.5, 1.5));
        assert_eq!(s[1], AxisQuery::Range(0.0, 2.0));
        let back = BoxSpec::from_json(&b.to_json(&d), &d).unwrap();
        assert_eq!(back, b);
    }

    #[test]
    fn rejects_bad_boxes() {
        let d = domain();
        for bad in [
            r#"{"param": {"h": [0.8, 0.6]}}"#,
            r#"{"param": {"h": [0.5, 0.6]}}"#,
            r#"{"param": {"q": 0.1}}"#,
            r#"{"spatial": {"w": 0.1}}"#,
            r#"{"params": {}}"#,
        ] {
            let v: Value = serde_json::from_str(bad).unwrap();
            assert!(BoxSpec::from_json(&v, &d).is_err(), "{bad}");
        }
    }

    #[test]
    fn out_of_domain_names_axis() {
        let d = domain();
        let v: Value = serde_json::from_str(r#"{"param": {"h": [0.6, 0.9]}}"#).unwrap();
        match BoxSpec::from_json(&v, &d) {
            Err(Error::Domain { axis, .. }) => assert_eq!(axis, "h"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn spans_normalize_and_collapse() {
        let d = domain();
        let r = QueryRegion::at([1.0, 0.0, 2.0], vec![AxisQuery::Range(0.12, 0.155), AxisQuery::Range(0.7, 0.7)]);
        let s = r.spans(&d).unwrap();
        assert_eq!(s[0], AxisSpan::Point(0.0));
        assert_eq!(s[1], AxisSpan::Point(-1.0));
        assert_eq!(s[2], AxisSpan::Point(1.0));
        assert!(matches!(s[3], AxisSpan::Range(lo, hi) if (lo + 1.0).abs() < 1e-12 && (hi - 1.0).abs() < 1e-12));
        assert!(matches!(s[4], AxisSpan::Point(_)));
    }
}
