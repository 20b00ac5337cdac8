//! Attribute-file ingestion, identity-relevant attribute selection and the
//! learned prompt embedder.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::error::{config_err, dim_err, Error, Result};
use crate::numerics::layers::Linear;
use crate::numerics::param::join;
use crate::{NumericArray, Parameter, Params, Scalar};

/// Attributes that describe the face itself rather than expression,
/// accessories or makeup.
pub const DEFAULT_IDENTITY_MASK: [&str; 18] = [
    "Male",
    "Young",
    "Big_Nose",
    "Pointy_Nose",
    "Big_Lips",
    "High_Cheekbones",
    "Oval_Face",
    "Chubby",
    "Double_Chin",
    "Narrow_Eyes",
    "Bags_Under_Eyes",
    "Bushy_Eyebrows",
    "Arched_Eyebrows",
    "Pale_Skin",
    "Rosy_Cheeks",
    "Receding_Hairline",
    "Bald",
    "5_o_Clock_Shadow",
];

/// One annotated sample: an identifier and `A` flags in `{-1, +1}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttributeRecord {
    pub sample_id: String,
    pub flags: Vec<i8>,
}

/// A parsed attribute file.
///
/// The layout follows the CelebA annotation files: an optional line holding
/// the record count, a line of attribute names, then one row per sample with
/// its identifier followed by space-separated `1`/`-1` values.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttributeTable {
    pub names: Vec<String>,
    pub records: Vec<AttributeRecord>,
    pub count_line: bool,
}

impl AttributeTable {
    pub fn attr_count(&self) -> usize {
        self.names.len()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()).peekable();
        let mut declared = None;
        if let Some((_, first)) = lines.peek() {
            let mut toks = first.split_whitespace();
            if let (Some(tok), None) = (toks.next(), toks.next()) {
                if let Ok(n) = tok.parse::<usize>() {
                    declared = Some(n);
                    lines.next();
                }
            }
        }
        let (hline, header) = lines.next().ok_or(Error::Parse { line: 1, msg: "missing attribute header".into() })?;
        let names: Vec<String> = header.split_whitespace().map(str::to_string).collect();
        if names.is_empty() {
            return Err(Error::Parse { line: hline + 1, msg: "empty attribute header".into() });
        }
        let mut records = Vec::new();
        for (idx, line) in lines {
            let lineno = idx + 1;
            let mut toks = line.split_whitespace();
            let id = toks.next().expect("non-blank line has a token").to_string();
            let values: Vec<&str> = toks.collect();
            if values.len() != names.len() {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("row '{}' has {} values, header names {}", id, values.len(), names.len()),
                });
            }
            let flags = values
                .iter()
                .map(|v| match *v {
                    "1" => Ok(1),
                    "-1" => Ok(-1),
                    other => Err(Error::Parse {
                        line: lineno,
                        msg: format!("row '{}' has value '{}', expected 1 or -1", id, other),
                    }),
                })
                .collect::<Result<Vec<i8>>>()?;
            records.push(AttributeRecord { sample_id: id, flags });
        }
        if let Some(n) = declared {
            if n != records.len() {
                return Err(Error::Parse {
                    line: 1,
                    msg: format!("count line declares {} records, found {}", n, records.len()),
                });
            }
        }
        Ok(Self { names, records, count_line: declared.is_some() })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        if self.count_line {
            writeln!(s, "{}", self.records.len()).unwrap();
        }
        writeln!(s, "{}", self.names.join(" ")).unwrap();
        for r in &self.records {
            s.push_str(&r.sample_id);
            for f in &r.flags {
                write!(s, " {:>2}", f).unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    /// Column indices of `mask`, in mask order.
    pub fn mask_indices<S: AsRef<str>>(&self, mask: &[S]) -> Result<Vec<usize>> {
        if mask.is_empty() {
            return Err(config_err("attribute mask must name at least one attribute"));
        }
        mask.iter()
            .map(|m| {
                let m = m.as_ref();
                self.names
                    .iter()
                    .position(|n| n == m)
                    .ok_or_else(|| config_err(format!("unknown attribute '{}'", m)))
            })
            .collect()
    }

    /// Prompt of every record under `mask`.
    pub fn prompts<S: AsRef<str>>(&self, mask: &[S]) -> Result<Vec<PromptVector>> {
        let idx = self.mask_indices(mask)?;
        Ok(self.records.iter().map(|r| PromptVector::from_record(r, &idx)).collect())
    }
}

/// Reads a CelebA-format attribute file.
pub fn load_attribute_file(path: impl AsRef<Path>) -> Result<AttributeTable> {
    AttributeTable::load(path)
}

/// Restricts one record to the named attributes, preserving mask order.
pub fn select_identity_relevant<S: AsRef<str>>(
    table: &AttributeTable,
    record: &AttributeRecord,
    mask: &[S],
) -> Result<PromptVector> {
    let idx = table.mask_indices(mask)?;
    Ok(PromptVector::from_record(record, &idx))
}

/// Identity-relevant attribute flags in `{-1, +1}`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PromptVector(Vec<i8>);

impl PromptVector {
    pub fn new(flags: Vec<i8>) -> Result<Self> {
        if flags.is_empty() {
            return Err(config_err("a prompt needs at least one attribute"));
        }
        if flags.iter().any(|&f| f != 1 && f != -1) {
            return Err(config_err("prompt flags must be 1 or -1"));
        }
        Ok(Self(flags))
    }

    fn from_record(record: &AttributeRecord, idx: &[usize]) -> Self {
        Self(idx.iter().map(|&i| record.flags[i]).collect())
    }

    /// `+1` where the value is non-negative, `-1` otherwise.
    pub fn from_signs<F: Scalar>(values: &[F]) -> Self {
        Self(values.iter().map(|&v| if v >= F::zero() { 1 } else { -1 }).collect())
    }

    pub fn flags(&self) -> &[i8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn flipped(&self, i: usize) -> Self {
        let mut f = self.0.clone();
        f[i] = -f[i];
        Self(f)
    }
}

/// Learned stand-in for a text tokenizer: one `d_p` vector per attribute and
/// polarity, concatenated and projected to `d_c`.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbedder<F> {
    /// `[K × 2 × d_p]`; polarity 0 is `-1`, polarity 1 is `+1`.
    pub table: Parameter<F>,
    pub projection: Linear<F>,
}

impl<F: Scalar> PromptEmbedder<F> {
    pub fn new<R: Rng + ?Sized>(attr_count: usize, d_p: usize, d_c: usize, rng: &mut R) -> Self {
        let table = NumericArray::randn(&[attr_count, 2, d_p], F::one(), rng);
        let std = F::lit((1.0 / (attr_count * d_p) as f64).sqrt());
        let projection = Linear::from_weights(
            NumericArray::randn(&[attr_count * d_p, d_c], std, rng),
            NumericArray::zeros(&[d_c]),
        );
        Self { table: Parameter::new(table), projection }
    }

    pub fn attr_count(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn d_p(&self) -> usize {
        self.table.shape()[2]
    }

    pub fn d_c(&self) -> usize {
        self.projection.d_out()
    }

    fn gather(&self, prompts: &[PromptVector]) -> Result<NumericArray<F>> {
        let (k, dp) = (self.attr_count(), self.d_p());
        let table = self.table.value.data();
        let mut out = NumericArray::zeros(&[prompts.len(), k * dp]);
        for (i, p) in prompts.iter().enumerate() {
            if p.len() != k {
                return Err(dim_err(format!("prompt has {} attributes, embedder expects {}", p.len(), k)));
            }
            let row = out.row_mut(i);
            for (a, &f) in p.flags().iter().enumerate() {
                let pol = usize::from(f > 0);
                let src = &table[(a * 2 + pol) * dp..(a * 2 + pol + 1) * dp];
                row[a * dp..(a + 1) * dp].copy_from_slice(src);
            }
        }
        Ok(out)
    }

    /// `[B × d_c]` embeddings.
    pub fn embed(&self, prompts: &[PromptVector]) -> Result<NumericArray<F>> {
        self.projection.forward(&self.gather(prompts)?)
    }

    pub fn embed_one(&self, prompt: &PromptVector) -> Result<NumericArray<F>> {
        let e = self.embed(std::slice::from_ref(prompt))?;
        e.reshape(vec![self.d_c()])
    }

    /// Returns the embeddings and the gathered table rows needed by [`Self::backward`].
    pub fn embed_tape(&self, prompts: &[PromptVector]) -> Result<(NumericArray<F>, NumericArray<F>)> {
        let gathered = self.gather(prompts)?;
        Ok((self.projection.forward(&gathered)?, gathered))
    }

    pub fn backward(&mut self, prompts: &[PromptVector], gathered: &NumericArray<F>, g: &NumericArray<F>) -> Result<()> {
        let g_rows = self.projection.backward(gathered, g)?;
        let dp = self.d_p();
        let tg = self.table.grad.data_mut();
        for (i, p) in prompts.iter().enumerate() {
            let row = g_rows.row(i);
            for (a, &f) in p.flags().iter().enumerate() {
                let pol = usize::from(f > 0);
                let dst = &mut tg[(a * 2 + pol) * dp..(a * 2 + pol + 1) * dp];
                for (d, &s) in dst.iter_mut().zip(&row[a * dp..(a + 1) * dp]) {
                    *d += s;
                }
            }
        }
        Ok(())
    }
}

impl<F: Scalar> Params<F> for PromptEmbedder<F> {
    fn visit_params(&self, prefix: &str, visit: &mut dyn FnMut(&str, &Parameter<F>)) {
        visit(&join(prefix, "table"), &self.table);
        self.projection.visit_params(&join(prefix, "projection"), visit);
    }

    fn visit_params_mut(&mut self, prefix: &str, visit: &mut dyn FnMut(&str, &mut Parameter<F>)) {
        visit(&join(prefix, "table"), &mut self.table);
        self.projection.visit_params_mut(&join(prefix, "projection"), visit);
    }
}
