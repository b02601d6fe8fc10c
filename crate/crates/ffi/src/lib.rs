//! C interface to the na1 diagnostics.
//!
//! Every fallible call returns an [`Na1Status`]; the message of the most
//! recent failure on the calling thread is available from
//! [`na1_last_error`]. Handles are opaque and must be released with their
//! `_free` function. Panics never cross the boundary.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use na1::grid::TimeGrid;
use na1::model::{from_catalog, MarketModel};
use na1::structure::{classify_na1, pseudo_solve, ClassifyOptions, Na1Class};
use na1::tree::scalar::Scalar;
use na1::tree::{deflator_feasibility, parse_tree, Feasibility, TreeModel};
use na1::Error;

/// Result codes. The nonzero values match the CLI exit codes where they
/// overlap.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Na1Status {
    Na1Ok = 0,
    Na1ErrOther = 1,
    Na1ErrInvalid = 2,
    Na1ErrRefused = 3,
    Na1ErrNull = 4,
    Na1ErrPanic = 5,
}

/// Verdict of [`na1_classify`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Na1Classification {
    Na1ClassOk = 0,
    Na1ClassStructureFail = 1,
    Na1ClassMassDiverges = 2,
    Na1ClassInconclusive = 3,
}

impl From<Na1Class> for Na1Classification {
    fn from(c: Na1Class) -> Self {
        match c {
            Na1Class::Na1Ok => Na1Classification::Na1ClassOk,
            Na1Class::StructureFail => Na1Classification::Na1ClassStructureFail,
            Na1Class::MassDiverges => Na1Classification::Na1ClassMassDiverges,
            Na1Class::Inconclusive => Na1Classification::Na1ClassInconclusive,
        }
    }
}

/// A catalog market model.
pub struct Na1Model {
    inner: MarketModel,
}

/// A parsed finite tree with exact rational data.
pub struct Na1Tree {
    inner: TreeModel<na1::tree::BigRational>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).unwrap_or_default());
}

fn status_of(e: &Error) -> Na1Status {
    if e.is_validation() {
        Na1Status::Na1ErrInvalid
    } else if matches!(e, Error::Refused(_)) {
        Na1Status::Na1ErrRefused
    } else {
        Na1Status::Na1ErrOther
    }
}

/// Run `f`, turning errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (Na1Status, String)>) -> Na1Status {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            Na1Status::Na1Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            Na1Status::Na1ErrPanic
        }
    }
}

fn fail(e: Error) -> (Na1Status, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (Na1Status, String) {
    (Na1Status::Na1ErrNull, format!("{what} is null"))
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, (Na1Status, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (Na1Status::Na1ErrInvalid, format!("{what} is not valid UTF-8")))
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn na1_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn na1_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Minimum-norm solution `ρ = c⁺a` and residual `a − cρ` for a symmetric
/// PSD `d × d` matrix `c` (row-major).
///
/// # Safety
/// `c` must point to `d*d` doubles; `a`, `rho_out` and `residual_out` to
/// `d` doubles each.
#[no_mangle]
pub unsafe extern "C" fn na1_pseudo_solve(
    c: *const f64,
    a: *const f64,
    d: usize,
    tol: f64,
    rho_out: *mut f64,
    residual_out: *mut f64,
) -> Na1Status {
    guard(|| {
        if c.is_null() || a.is_null() || rho_out.is_null() || residual_out.is_null() {
            return Err(null("an array argument"));
        }
        if d == 0 {
            return Err((Na1Status::Na1ErrInvalid, "dimension must be positive".into()));
        }
        let c = std::slice::from_raw_parts(c, d * d);
        let a = std::slice::from_raw_parts(a, d);
        let (rho, res) = pseudo_solve(c, a, tol).map_err(fail)?;
        std::slice::from_raw_parts_mut(rho_out, d).copy_from_slice(&rho);
        std::slice::from_raw_parts_mut(residual_out, d).copy_from_slice(&res);
        Ok(())
    })
}

/// Build a catalog model. `keys`/`values` hold `n` parameter overrides and
/// may be null when `n` is 0. Returns null on failure.
///
/// # Safety
/// `name` must be a NUL-terminated string; `keys` must point to `n` such
/// strings and `values` to `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn na1_model_new(
    name: *const c_char,
    keys: *const *const c_char,
    values: *const f64,
    n: usize,
) -> *mut Na1Model {
    let mut out = ptr::null_mut();
    guard(|| {
        let name = read_str(name, "model name")?;
        let mut params = BTreeMap::new();
        if n > 0 {
            if keys.is_null() || values.is_null() {
                return Err(null("parameter array"));
            }
            let keys = std::slice::from_raw_parts(keys, n);
            let values = std::slice::from_raw_parts(values, n);
            for (k, v) in keys.iter().zip(values) {
                params.insert(read_str(*k, "parameter name")?.to_string(), *v);
            }
        }
        let model = from_catalog(name, &params).map_err(fail)?;
        out = Box::into_raw(Box::new(Na1Model { inner: model }));
        Ok(())
    });
    out
}

/// Release a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`na1_model_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn na1_model_free(model: *mut Na1Model) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of assets; 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn na1_model_dim(model: *const Na1Model) -> usize {
    model.as_ref().map_or(0, |m| m.inner.dim())
}

/// Classify a model from `paths` paths on a uniform grid refined `levels − 1`
/// times by `factor`. `overall_ratio_out` may be null.
///
/// # Safety
/// `model` must be a live handle; `class_out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn na1_classify(
    model: *const Na1Model,
    horizon: f64,
    steps: usize,
    paths: usize,
    seed: u64,
    levels: usize,
    factor: usize,
    class_out: *mut Na1Classification,
    overall_ratio_out: *mut f64,
) -> Na1Status {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        if class_out.is_null() {
            return Err(null("class_out"));
        }
        let grid = TimeGrid::uniform(horizon, steps).map_err(fail)?;
        let opts = ClassifyOptions {
            levels,
            factor,
            ..ClassifyOptions::default()
        };
        let rep = classify_na1(&model.inner, &grid, paths, seed, &opts).map_err(fail)?;
        *class_out = rep.classification.into();
        if !overall_ratio_out.is_null() {
            *overall_ratio_out = rep.overall_ratio;
        }
        Ok(())
    })
}

/// Parse a tree description (TOML text). Returns null on failure.
///
/// # Safety
/// `text` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn na1_tree_parse(text: *const c_char) -> *mut Na1Tree {
    let mut out = ptr::null_mut();
    guard(|| {
        let text = read_str(text, "tree text")?;
        let tree = parse_tree(text).map_err(fail)?;
        out = Box::into_raw(Box::new(Na1Tree { inner: tree }));
        Ok(())
    });
    out
}

/// Release a tree. Null is ignored.
///
/// # Safety
/// `tree` must come from [`na1_tree_parse`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn na1_tree_free(tree: *mut Na1Tree) {
    if !tree.is_null() {
        drop(Box::from_raw(tree));
    }
}

/// Number of nodes; 0 for a null handle.
///
/// # Safety
/// `tree` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn na1_tree_len(tree: *const Na1Tree) -> usize {
    tree.as_ref().map_or(0, |t| t.inner.len())
}

/// Solve for a deflator in exact arithmetic. On success `*feasible_out` is
/// 1 and `y_out` receives the density at each node (file order), rounded
/// to double; otherwise `*feasible_out` is 0 and `*arbitrage_node_out` is
/// the first node admitting a one-period arbitrage.
///
/// # Safety
/// `tree` must be a live handle, `y_out` must hold `len` doubles with
/// `len == na1_tree_len(tree)`, and the two int pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn na1_tree_deflator(
    tree: *const Na1Tree,
    y_out: *mut f64,
    len: usize,
    feasible_out: *mut i32,
    arbitrage_node_out: *mut usize,
) -> Na1Status {
    guard(|| {
        let tree = tree.as_ref().ok_or_else(|| null("tree"))?;
        if y_out.is_null() || feasible_out.is_null() || arbitrage_node_out.is_null() {
            return Err(null("an output pointer"));
        }
        if len != tree.inner.len() {
            return Err((
                Na1Status::Na1ErrInvalid,
                format!("output holds {len} values but the tree has {} nodes", tree.inner.len()),
            ));
        }
        match deflator_feasibility(&tree.inner) {
            Feasibility::Deflator { y, .. } => {
                let out = std::slice::from_raw_parts_mut(y_out, len);
                for (o, v) in out.iter_mut().zip(&y) {
                    *o = v.to_f64();
                }
                *feasible_out = 1;
            }
            Feasibility::Infeasible { node, .. } => {
                *feasible_out = 0;
                *arbitrage_node_out = node;
            }
        }
        Ok(())
    })
}

/// Run a CLI command, e.g. `{"na1", "check-na1", "--config", "x.toml"}`,
/// and return its exit code.
///
/// # Safety
/// `argv` must point to `argc` NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn na1_run_command(argc: i32, argv: *const *const c_char) -> i32 {
    let mut code = na1::cli::EXIT_OTHER;
    let status = guard(|| {
        if argv.is_null() || argc < 1 {
            return Err(null("argv"));
        }
        let raw = std::slice::from_raw_parts(argv, argc as usize);
        let args = raw
            .iter()
            .map(|p| read_str(*p, "argument").map(str::to_string))
            .collect::<Result<Vec<_>, _>>()?;
        code = na1::cli::run(args);
        Ok(())
    });
    match status {
        Na1Status::Na1Ok => code,
        Na1Status::Na1ErrPanic => na1::cli::EXIT_OTHER,
        _ => na1::cli::EXIT_VALIDATION,
    }
}
