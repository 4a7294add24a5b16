use std::str::FromStr;

use crate::error::{Error, Result};

/// A parsed scalar expression over real variables. Gauges use x1..xn;
/// potentials over complex coordinates use x1,y1..xm,ym.
#[derive(Clone, Debug)]
pub struct ScalarField {
    expr: meval::Expr,
    text: String,
    names: Vec<String>,
}

struct Vars<'a> {
    names: &'a [String],
    vals: &'a [f64],
}

impl meval::ContextProvider for Vars<'_> {
    fn get_var(&self, name: &str) -> Option<f64> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.vals[i])
    }
}

impl ScalarField {
    pub fn parse(text: &str, names: Vec<String>) -> Result<Self> {
        let expr = meval::Expr::from_str(text)
            .map_err(|e| Error::input(format!("cannot parse expression {text:?}: {e}")))?;
        let field = ScalarField {
            expr,
            text: text.to_string(),
            names,
        };
        // Surface unknown identifiers now rather than per evaluation.
        let probe = vec![0.37; field.names.len()];
        field
            .expr
            .eval_with_context((meval::Context::new(), Vars {
                names: &field.names,
                vals: &probe,
            }))
            .map_err(|e| Error::input(format!("expression {text:?} does not evaluate: {e}")))?;
        Ok(field)
    }

    /// Variables named x1..xn.
    pub fn parse_real(text: &str, dim: usize) -> Result<Self> {
        let names = (1..=dim).map(|i| format!("x{i}")).collect();
        Self::parse(text, names)
    }

    /// Variables named x1,y1..xm,ym for m complex coordinates.
    pub fn parse_complex(text: &str, m: usize) -> Result<Self> {
        let names = (1..=m).flat_map(|i| [format!("x{i}"), format!("y{i}")]).collect();
        Self::parse(text, names)
    }

    /// Evaluate; domain failures surface as NaN for the caller to map to
    /// an evaluation error that names the offending point.
    pub fn eval(&self, vals: &[f64]) -> f64 {
        debug_assert_eq!(vals.len(), self.names.len());
        self.expr
            .eval_with_context((meval::Context::new(), Vars {
                names: &self.names,
                vals,
            }))
            .unwrap_or(f64::NAN)
    }

    pub fn text(&self) -> &str {
        &self.text
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_evaluates_gauge_expression() {
        let f = ScalarField::parse_real("sqrt(x1^2 + 4*x2^2)", 2).unwrap();
        assert!((f.eval(&[3.0, 2.0]) - 5.0).abs() < 1e-14);
    }

    #[test]
    fn unknown_variable_is_an_input_error() {
        let err = ScalarField::parse_real("x1 + q", 1).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }

    #[test]
    fn syntax_error_is_an_input_error() {
        assert!(ScalarField::parse_real("x1 +", 1).is_err());
    }

    #[test]
    fn complex_variable_naming() {
        let f = ScalarField::parse_complex("x1*x1 + y1*y1", 1).unwrap();
        assert!((f.eval(&[3.0, 4.0]) - 25.0).abs() < 1e-14);
    }
}
