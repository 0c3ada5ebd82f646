//! In-memory datasets and the numeric model frame `(y, X, Z_1..Z_r)`.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec::Vec;
use core::ops::Range;

use nalgebra::{DMatrix, DMatrixView, DVector};

use crate::error::{Error, Result};
use crate::formula::{FormulaAst, Slope};
use crate::linalg;

/// A single dataset column.
#[derive(Debug, Clone, PartialEq)]
pub enum Column {
    Numeric(Vec<f64>),
    /// Level codes index into `levels`, which are kept in first-appearance order.
    Categorical {
        levels: Vec<String>,
        codes: Vec<usize>,
    },
}

impl Column {
    pub fn len(&self) -> usize {
        match self {
            Column::Numeric(v) => v.len(),
            Column::Categorical { codes, .. } => codes.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Categorical column from raw strings.
    pub fn categorical<S: AsRef<str>>(values: &[S]) -> Column {
        let mut levels: Vec<String> = Vec::new();
        let codes = values
            .iter()
            .map(|v| {
                let v = v.as_ref();
                match levels.iter().position(|l| l == v) {
                    Some(i) => i,
                    None => {
                        levels.push(v.to_string());
                        levels.len() - 1
                    }
                }
            })
            .collect();
        Column::Categorical { levels, codes }
    }

    /// Levels and per-row codes when the column is used as a grouping factor.
    /// Numeric columns group by their distinct values.
    fn grouping(&self) -> (Vec<String>, Vec<usize>) {
        match self {
            Column::Categorical { levels, codes } => (levels.clone(), codes.clone()),
            Column::Numeric(values) => {
                let mut distinct: Vec<f64> = Vec::new();
                let codes = values
                    .iter()
                    .map(
                        |v| match distinct.iter().position(|d| d.to_bits() == v.to_bits()) {
                            Some(i) => i,
                            None => {
                                distinct.push(*v);
                                distinct.len() - 1
                            }
                        },
                    )
                    .collect();
                (distinct.iter().map(|d| format!("{d}")).collect(), codes)
            }
        }
    }
}

/// Named, rectangular, complete table.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    names: Vec<String>,
    columns: Vec<Column>,
    n: usize,
}

impl Dataset {
    pub fn new(columns: Vec<(String, Column)>) -> Result<Self> {
        let Some(n) = columns.first().map(|(_, c)| c.len()) else {
            return Err(Error::InvalidData("dataset has no columns".into()));
        };
        let mut names = Vec::with_capacity(columns.len());
        let mut cols = Vec::with_capacity(columns.len());
        for (name, col) in columns {
            if names.contains(&name) {
                return Err(Error::InvalidData(format!(
                    "duplicate column name `{name}`"
                )));
            }
            if col.len() != n {
                return Err(Error::InvalidData(format!(
                    "column `{name}` has {} rows, expected {n}",
                    col.len()
                )));
            }
            if let Column::Numeric(v) = &col {
                if let Some(row) = v.iter().position(|x| !x.is_finite()) {
                    return Err(Error::InvalidData(format!(
                        "column `{name}` row {row}: non-finite value"
                    )));
                }
            }
            names.push(name);
            cols.push(col);
        }
        if n < 3 {
            return Err(Error::InvalidData(format!(
                "need at least 3 rows, found {n}"
            )));
        }
        Ok(Dataset {
            names,
            columns: cols,
            n,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn column(&self, name: &str) -> Option<&Column> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.columns[i])
    }

    fn numeric(&self, name: &str, role: &'static str) -> Result<&[f64]> {
        match self.column(name) {
            None => Err(Error::UnknownColumn(name.into())),
            Some(Column::Numeric(v)) => Ok(v),
            Some(Column::Categorical { .. }) => Err(Error::CategoricalColumn {
                column: name.into(),
                role,
            }),
        }
    }
}

/// One random-effect block `Z_i` and where its columns sit inside `Z`.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomBlock {
    pub label: String,
    pub column_labels: Vec<String>,
    pub range: Range<usize>,
}

impl RandomBlock {
    pub fn size(&self) -> usize {
        self.range.len()
    }
}

#[derive(Debug)]
struct Design {
    x: DMatrix<f64>,
    x_labels: Vec<String>,
    z: DMatrix<f64>,
    blocks: Vec<RandomBlock>,
    ztz: Option<DMatrix<f64>>,
}

/// Numeric objects of the mixed model: response `y` (n), fixed design `X`
/// (n × k, intercept excluded) and random design `Z = (Z_1, …, Z_r)` (n × p).
///
/// The design part is reference counted, so frames that differ only in the
/// response (bootstrap replicates) share it.
#[derive(Debug, Clone)]
pub struct ModelFrame {
    response: String,
    y: DVector<f64>,
    design: Arc<Design>,
}

impl ModelFrame {
    /// Frame from explicit matrices. Each `z_blocks` entry is a block label and
    /// an n × p_i matrix; column labels default to `label[j]`.
    pub fn new(
        response: impl Into<String>,
        y: DVector<f64>,
        x: DMatrix<f64>,
        x_labels: Vec<String>,
        z_blocks: Vec<(String, DMatrix<f64>)>,
    ) -> Result<Self> {
        let blocks = z_blocks
            .into_iter()
            .map(|(label, m)| {
                let cols = (0..m.ncols()).map(|j| format!("{label}[{j}]")).collect();
                (label, cols, m)
            })
            .collect();
        Self::with_labels(response.into(), y, x, x_labels, blocks)
    }

    fn with_labels(
        response: String,
        y: DVector<f64>,
        x: DMatrix<f64>,
        x_labels: Vec<String>,
        z_blocks: Vec<(String, Vec<String>, DMatrix<f64>)>,
    ) -> Result<Self> {
        let n = y.len();
        if n < 3 {
            return Err(Error::DegenerateFrame(format!("need n >= 3, found {n}")));
        }
        if x.nrows() != n {
            return Err(Error::InvalidArgument(format!(
                "X has {} rows, y has {n}",
                x.nrows()
            )));
        }
        if x_labels.len() != x.ncols() {
            return Err(Error::InvalidArgument(
                "one label per X column required".into(),
            ));
        }
        let k = x.ncols();
        if n <= k + 1 {
            return Err(Error::DegenerateFrame(format!(
                "n = {n} leaves no residual degrees of freedom for k = {k} fixed effects"
            )));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("response"));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("fixed-effect design"));
        }

        let p: usize = z_blocks.iter().map(|(_, _, m)| m.ncols()).sum();
        let mut z = DMatrix::zeros(n, p);
        let mut blocks = Vec::with_capacity(z_blocks.len());
        let mut offset = 0;
        for (label, column_labels, m) in z_blocks {
            if m.nrows() != n {
                return Err(Error::InvalidArgument(format!(
                    "block `{label}` has {} rows, expected {n}",
                    m.nrows()
                )));
            }
            if m.ncols() == 0 {
                return Err(Error::InvalidArgument(format!(
                    "block `{label}` has no columns"
                )));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("random-effect design"));
            }
            z.columns_mut(offset, m.ncols()).copy_from(&m);
            blocks.push(RandomBlock {
                label,
                column_labels,
                range: offset..offset + m.ncols(),
            });
            offset += m.ncols();
        }

        let mut x_tilde = DMatrix::from_element(n, k + 1, 1.0);
        x_tilde.columns_mut(1, k).copy_from(&x);
        let rank = linalg::column_rank(&x_tilde);
        if rank < k + 1 {
            return Err(Error::RankDeficient {
                rank,
                columns: k + 1,
            });
        }

        let ztz = (p < n).then(|| z.tr_mul(&z));
        Ok(ModelFrame {
            response,
            y,
            design: Arc::new(Design {
                x,
                x_labels,
                z,
                blocks,
                ztz,
            }),
        })
    }

    /// Same design, different response.
    pub fn with_response(&self, y: DVector<f64>) -> Result<Self> {
        if y.len() != self.n() {
            return Err(Error::InvalidArgument(format!(
                "response has {} rows, frame has {}",
                y.len(),
                self.n()
            )));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("response"));
        }
        Ok(ModelFrame {
            response: self.response.clone(),
            y,
            design: Arc::clone(&self.design),
        })
    }

    pub fn response_name(&self) -> &str {
        &self.response
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn k(&self) -> usize {
        self.design.x.ncols()
    }

    pub fn r(&self) -> usize {
        self.design.blocks.len()
    }

    pub fn p(&self) -> usize {
        self.design.z.ncols()
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.design.x
    }

    pub fn x_labels(&self) -> &[String] {
        &self.design.x_labels
    }

    /// `X̃ = (1, X)`.
    pub fn x_tilde(&self) -> DMatrix<f64> {
        let (n, k) = (self.n(), self.k());
        let mut xt = DMatrix::from_element(n, k + 1, 1.0);
        xt.columns_mut(1, k).copy_from(&self.design.x);
        xt
    }

    pub fn z(&self) -> &DMatrix<f64> {
        &self.design.z
    }

    /// `ZᵀZ`, cached when `p < n`.
    pub fn ztz(&self) -> Option<&DMatrix<f64>> {
        self.design.ztz.as_ref()
    }

    pub fn blocks(&self) -> &[RandomBlock] {
        &self.design.blocks
    }

    pub fn block_ranges(&self) -> Vec<Range<usize>> {
        self.design.blocks.iter().map(|b| b.range.clone()).collect()
    }

    pub fn z_block(&self, i: usize) -> DMatrixView<'_, f64> {
        let range = &self.design.blocks[i].range;
        self.design.z.columns(range.start, range.len())
    }

    /// Sample variance of the response, `yᵀCy / (n - 1)`.
    pub fn sample_variance_y(&self) -> f64 {
        let c = linalg::center_vec(&self.y);
        c.norm_squared() / (self.n() as f64 - 1.0)
    }
}

/// Materialize `y`, `X` and the `Z_i` blocks of `ast` from `data`.
///
/// Fixed columns follow formula order. `(1 || g)` becomes the one-hot
/// indicator of `g`; `(x || g)` multiplies each indicator column by `x`.
/// Group levels are ordered by first appearance.
pub fn build_model_frame(data: &Dataset, ast: &FormulaAst) -> Result<ModelFrame> {
    let n = data.n_rows();
    let y = DVector::from_column_slice(data.numeric(&ast.response, "the response")?);

    let mut x = DMatrix::zeros(n, ast.fixed.len());
    for (j, name) in ast.fixed.iter().enumerate() {
        let col = data.numeric(name, "a fixed effect")?;
        x.column_mut(j).copy_from_slice(col);
    }

    let mut blocks = Vec::with_capacity(ast.random.len());
    for term in &ast.random {
        let group = data
            .column(&term.group)
            .ok_or_else(|| Error::UnknownColumn(term.group.clone()))?;
        let (levels, codes) = group.grouping();
        let slope = match &term.slope {
            Slope::Intercept => None,
            Slope::Column(c) => Some(data.numeric(c, "a random slope")?),
        };
        let mut m = DMatrix::zeros(n, levels.len());
        for (row, &code) in codes.iter().enumerate() {
            m[(row, code)] = slope.map_or(1.0, |s| s[row]);
        }
        let column_labels = levels
            .iter()
            .map(|l| format!("{}={l}", term.group))
            .collect();
        blocks.push((term.label(), column_labels, m));
    }

    ModelFrame::with_labels(ast.response.clone(), y, x, ast.fixed.clone(), blocks)
}
