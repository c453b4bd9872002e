//! Forward/backward kernels for the sequence primitives (1-D convolution,
//! transposed convolution, LSTM). These operate on flat row-major buffers
//! and are driven by the tape in `tape.rs`.

/// Output length of a 1-D convolution.
pub fn conv1d_out_len(t: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = t + 2 * pad;
    if kernel > padded || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Output length of a 1-D transposed convolution.
pub fn deconv1d_out_len(t: usize, kernel: usize, stride: usize, pad: usize) -> Option<i64> {
    let len = (t as i64 - 1) * stride as i64 - 2 * pad as i64 + kernel as i64;
    if len <= 0 {
        None
    } else {
        Some(len)
    }
}

/// Cross-correlation. x: [T×Cin], w: [Cout×Cin×K], b: [Cout] -> [T'×Cout].
pub fn conv1d_forward(
    x: &[f64],
    t: usize,
    cin: usize,
    w: &[f64],
    cout: usize,
    k: usize,
    b: &[f64],
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let t_out = conv1d_out_len(t, k, stride, pad).expect("checked by caller");
    let mut out = vec![0.0; t_out * cout];
    for to in 0..t_out {
        let base = to * stride;
        for co in 0..cout {
            let mut acc = b[co];
            let wrow = &w[co * cin * k..(co + 1) * cin * k];
            for kk in 0..k {
                let ti = base + kk;
                if ti < pad || ti - pad >= t {
                    continue;
                }
                let xrow = &x[(ti - pad) * cin..(ti - pad + 1) * cin];
                let wcol = &wrow[kk..];
                for ci in 0..cin {
                    acc += xrow[ci] * wcol[ci * k];
                }
            }
            out[to * cout + co] = acc;
        }
    }
    out
}

/// Gradients of conv1d w.r.t. x, w, b given the output gradient.
#[allow(clippy::too_many_arguments)]
pub fn conv1d_backward(
    x: &[f64],
    t: usize,
    cin: usize,
    w: &[f64],
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    gout: &[f64],
    gx: Option<&mut [f64]>,
    gw: Option<&mut [f64]>,
    gb: Option<&mut [f64]>,
) {
    let t_out = conv1d_out_len(t, k, stride, pad).expect("checked by caller");
    if let Some(gb) = gb {
        for to in 0..t_out {
            for co in 0..cout {
                gb[co] += gout[to * cout + co];
            }
        }
    }
    if let Some(gw) = gw {
        for to in 0..t_out {
            let base = to * stride;
            for co in 0..cout {
                let g = gout[to * cout + co];
                if g == 0.0 {
                    continue;
                }
                let grow = &mut gw[co * cin * k..(co + 1) * cin * k];
                for kk in 0..k {
                    let ti = base + kk;
                    if ti < pad || ti - pad >= t {
                        continue;
                    }
                    let xrow = &x[(ti - pad) * cin..(ti - pad + 1) * cin];
                    for ci in 0..cin {
                        grow[ci * k + kk] += g * xrow[ci];
                    }
                }
            }
        }
    }
    if let Some(gx) = gx {
        for to in 0..t_out {
            let base = to * stride;
            for co in 0..cout {
                let g = gout[to * cout + co];
                if g == 0.0 {
                    continue;
                }
                let wrow = &w[co * cin * k..(co + 1) * cin * k];
                for kk in 0..k {
                    let ti = base + kk;
                    if ti < pad || ti - pad >= t {
                        continue;
                    }
                    let gxrow = &mut gx[(ti - pad) * cin..(ti - pad + 1) * cin];
                    for ci in 0..cin {
                        gxrow[ci] += g * wrow[ci * k + kk];
                    }
                }
            }
        }
    }
}

/// Transposed convolution (adjoint of conv1d without bias, plus bias).
/// x: [T×Cin], w: [Cin×Cout×K], b: [Cout] -> [T'×Cout] where
/// T' = (T−1)·stride − 2·pad + K.
pub fn deconv1d_forward(
    x: &[f64],
    t: usize,
    cin: usize,
    w: &[f64],
    cout: usize,
    k: usize,
    b: &[f64],
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let t_out = deconv1d_out_len(t, k, stride, pad).expect("checked by caller") as usize;
    let mut out = vec![0.0; t_out * cout];
    for to in 0..t_out {
        for co in 0..cout {
            out[to * cout + co] = b[co];
        }
    }
    for ti in 0..t {
        let xrow = &x[ti * cin..(ti + 1) * cin];
        for kk in 0..k {
            let to = ti as i64 * stride as i64 + kk as i64 - pad as i64;
            if to < 0 || to as usize >= t_out {
                continue;
            }
            let orow = &mut out[to as usize * cout..(to as usize + 1) * cout];
            for ci in 0..cin {
                let xv = xrow[ci];
                if xv == 0.0 {
                    continue;
                }
                let wrow = &w[(ci * cout) * k + kk..];
                for co in 0..cout {
                    orow[co] += xv * wrow[co * k];
                }
            }
        }
    }
    out
}

/// Gradients of deconv1d w.r.t. x, w, b given the output gradient.
#[allow(clippy::too_many_arguments)]
pub fn deconv1d_backward(
    x: &[f64],
    t: usize,
    cin: usize,
    w: &[f64],
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    gout: &[f64],
    t_out: usize,
    mut gx: Option<&mut [f64]>,
    mut gw: Option<&mut [f64]>,
    gb: Option<&mut [f64]>,
) {
    if let Some(gb) = gb {
        for to in 0..t_out {
            for co in 0..cout {
                gb[co] += gout[to * cout + co];
            }
        }
    }
    for ti in 0..t {
        for kk in 0..k {
            let to = ti as i64 * stride as i64 + kk as i64 - pad as i64;
            if to < 0 || to as usize >= t_out {
                continue;
            }
            let grow = &gout[to as usize * cout..(to as usize + 1) * cout];
            for ci in 0..cin {
                let wrow = &w[(ci * cout) * k + kk..];
                if let Some(gx) = gx.as_deref_mut() {
                    let mut acc = 0.0;
                    for co in 0..cout {
                        acc += grow[co] * wrow[co * k];
                    }
                    gx[ti * cin + ci] += acc;
                }
                if let Some(gw) = gw.as_deref_mut() {
                    let xv = x[ti * cin + ci];
                    if xv != 0.0 {
                        for co in 0..cout {
                            gw[(ci * cout + co) * k + kk] += grow[co] * xv;
                        }
                    }
                }
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Forward state saved for LSTM backward: per-step gate activations and
/// cell states (post-activation values, not pre-activations).
#[derive(Debug, Clone)]
pub struct LstmSaved {
    /// [T×4H] activated gates in order i, f, g, o.
    pub gates: Vec<f64>,
    /// [T×H] cell states.
    pub cell: Vec<f64>,
    /// [T×H] tanh(cell).
    pub tanh_cell: Vec<f64>,
}

/// LSTM over a sequence with zero initial hidden/cell state.
/// x: [T×Cin], w_ih: [4H×Cin], w_hh: [4H×H], b: [4H] -> hidden sequence [T×H].
/// Gate order within the 4H axis: input, forget, cell candidate, output.
pub fn lstm_forward(
    x: &[f64],
    t: usize,
    cin: usize,
    w_ih: &[f64],
    w_hh: &[f64],
    b: &[f64],
    hidden: usize,
) -> (Vec<f64>, LstmSaved) {
    let h = hidden;
    let mut out = vec![0.0; t * h];
    let mut saved = LstmSaved {
        gates: vec![0.0; t * 4 * h],
        cell: vec![0.0; t * h],
        tanh_cell: vec![0.0; t * h],
    };
    let mut h_prev = vec![0.0; h];
    let mut c_prev = vec![0.0; h];
    let mut pre = vec![0.0; 4 * h];
    for step in 0..t {
        let xrow = &x[step * cin..(step + 1) * cin];
        for (g, p) in pre.iter_mut().enumerate() {
            let mut acc = b[g];
            let wi = &w_ih[g * cin..(g + 1) * cin];
            for ci in 0..cin {
                acc += wi[ci] * xrow[ci];
            }
            let wh = &w_hh[g * h..(g + 1) * h];
            for j in 0..h {
                acc += wh[j] * h_prev[j];
            }
            *p = acc;
        }
        let gates = &mut saved.gates[step * 4 * h..(step + 1) * 4 * h];
        for j in 0..h {
            let ig = sigmoid(pre[j]);
            let fg = sigmoid(pre[h + j]);
            let gg = pre[2 * h + j].tanh();
            let og = sigmoid(pre[3 * h + j]);
            gates[j] = ig;
            gates[h + j] = fg;
            gates[2 * h + j] = gg;
            gates[3 * h + j] = og;
            let c = fg * c_prev[j] + ig * gg;
            let tc = c.tanh();
            saved.cell[step * h + j] = c;
            saved.tanh_cell[step * h + j] = tc;
            out[step * h + j] = og * tc;
        }
        h_prev.copy_from_slice(&out[step * h..(step + 1) * h]);
        c_prev.copy_from_slice(&saved.cell[step * h..(step + 1) * h]);
    }
    (out, saved)
}

/// Backpropagation through time for `lstm_forward`.
#[allow(clippy::too_many_arguments)]
pub fn lstm_backward(
    x: &[f64],
    t: usize,
    cin: usize,
    w_ih: &[f64],
    w_hh: &[f64],
    hidden: usize,
    out: &[f64],
    saved: &LstmSaved,
    gout: &[f64],
    gx: Option<&mut [f64]>,
    mut gw_ih: Option<&mut [f64]>,
    mut gw_hh: Option<&mut [f64]>,
    mut gb: Option<&mut [f64]>,
) {
    let h = hidden;
    let mut gx = gx;
    let mut dh = vec![0.0; h]; // gradient flowing into h_t from t+1
    let mut dc = vec![0.0; h];
    let mut da = vec![0.0; 4 * h];
    for step in (0..t).rev() {
        let gates = &saved.gates[step * 4 * h..(step + 1) * 4 * h];
        for j in 0..h {
            let dh_total = dh[j] + gout[step * h + j];
            let og = gates[3 * h + j];
            let tc = saved.tanh_cell[step * h + j];
            let dct = dc[j] + dh_total * og * (1.0 - tc * tc);
            let ig = gates[j];
            let fg = gates[h + j];
            let gg = gates[2 * h + j];
            let c_prev = if step == 0 { 0.0 } else { saved.cell[(step - 1) * h + j] };
            da[j] = dct * gg * ig * (1.0 - ig);
            da[h + j] = dct * c_prev * fg * (1.0 - fg);
            da[2 * h + j] = dct * ig * (1.0 - gg * gg);
            da[3 * h + j] = dh_total * tc * og * (1.0 - og);
            dc[j] = dct * fg; // becomes dc_{t-1}
        }
        let xrow = &x[step * cin..(step + 1) * cin];
        let hprev = if step == 0 { None } else { Some(&out[(step - 1) * h..step * h]) };
        if let Some(gb) = gb.as_deref_mut() {
            for g in 0..4 * h {
                gb[g] += da[g];
            }
        }
        if let Some(gw) = gw_ih.as_deref_mut() {
            for g in 0..4 * h {
                let d = da[g];
                if d == 0.0 {
                    continue;
                }
                let row = &mut gw[g * cin..(g + 1) * cin];
                for ci in 0..cin {
                    row[ci] += d * xrow[ci];
                }
            }
        }
        if let Some(gw) = gw_hh.as_deref_mut() {
            if let Some(hp) = hprev {
                for g in 0..4 * h {
                    let d = da[g];
                    if d == 0.0 {
                        continue;
                    }
                    let row = &mut gw[g * h..(g + 1) * h];
                    for j in 0..h {
                        row[j] += d * hp[j];
                    }
                }
            }
        }
        if let Some(gx) = gx.as_deref_mut() {
            let row = &mut gx[step * cin..(step + 1) * cin];
            for g in 0..4 * h {
                let d = da[g];
                if d == 0.0 {
                    continue;
                }
                let wi = &w_ih[g * cin..(g + 1) * cin];
                for ci in 0..cin {
                    row[ci] += d * wi[ci];
                }
            }
        }
        // gradient into h_{t-1}
        for j in 0..h {
            dh[j] = 0.0;
        }
        for g in 0..4 * h {
            let d = da[g];
            if d == 0.0 {
                continue;
            }
            let wh = &w_hh[g * h..(g + 1) * h];
            for j in 0..h {
                dh[j] += d * wh[j];
            }
        }
    }
}
