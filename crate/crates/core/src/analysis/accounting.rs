use crate::error::{Error, Result};

/// Widths that determine LoRA and connection parameter counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    pub d_hidden: u64,
    pub d_kv: u64,
    pub d_inter: u64,
    pub n_layers: u64,
}

pub const DIMS_PRESETS: [(&str, Dims); 3] = [
    (
        "llama-1b",
        Dims {
            d_hidden: 2048,
            d_kv: 512,
            d_inter: 8192,
            n_layers: 16,
        },
    ),
    (
        "llama-8b",
        Dims {
            d_hidden: 4096,
            d_kv: 1024,
            d_inter: 14336,
            n_layers: 32,
        },
    ),
    (
        "qwen-1.7b",
        Dims {
            d_hidden: 2048,
            d_kv: 1024,
            d_inter: 6144,
            n_layers: 28,
        },
    ),
];

pub fn dims_preset(name: &str) -> Result<Dims> {
    DIMS_PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, d)| *d)
        .ok_or_else(|| {
            let known: Vec<&str> = DIMS_PRESETS.iter().map(|(n, _)| *n).collect();
            Error::param(format!("unknown dims preset {name:?} (known: {})", known.join(", ")))
        })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub per_block: u64,
    pub per_connection: u64,
    /// `L · per_block`.
    pub baseline_total: u64,
    /// `L · per_block + n_conn · per_connection`.
    pub turboconn_total: u64,
}

/// LoRA parameters in one block adapting q, k, v, o, gate, up and down.
pub fn block_params(dims: &Dims, r: u64) -> u64 {
    4 * r * dims.d_hidden + 2 * r * (dims.d_hidden + dims.d_kv) + 3 * r * (dims.d_hidden + dims.d_inter)
}

/// One low-rank connection with both biases.
pub fn connection_params(d_hidden: u64, r_d: u64) -> u64 {
    2 * r_d * d_hidden + r_d + d_hidden
}

pub fn count_params(dims: &Dims, r: u64, n_conn: u64, r_d: u64) -> Result<ParamCount> {
    if [dims.d_hidden, dims.d_kv, dims.d_inter, dims.n_layers, r, r_d].contains(&0) {
        return Err(Error::param(
            "parameter accounting needs every width and rank to be at least 1",
        ));
    }
    let per_block = block_params(dims, r);
    let per_connection = connection_params(dims.d_hidden, r_d);
    let baseline_total = dims.n_layers * per_block;
    Ok(ParamCount {
        per_block,
        per_connection,
        baseline_total,
        turboconn_total: baseline_total + n_conn * per_connection,
    })
}

/// Format with thousands separators, e.g. `98,631,680`.
pub fn with_commas(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}
