"""Vectorized forward/backward engine for the unrolled decoder.

Internal module. Messages live in a padded (m, d_max, batch) layout over
the plan's base matrix: row c holds the edges of check node c, padded
slots carry neutral elements (1 for tanh products, +inf for mins). A
pruned CN's outgoing messages are exact zeros, which makes masking,
cross-layer extrinsic exclusion and the "pruning == zero weight"
equivalence all fall out of the same representation.

The backward pass is hand-derived reverse mode. The only non-obvious
piece is the gradient of the per-edge leave-one-out tanh product: it is
computed exactly (and division-free, so exact zeros are safe) as the dual
part of a product-except-self over dual numbers (t_k + eps * adjoint_k),
via dual prefix/suffix products along the slot axis.

Evaluation-order contract (required for bit-exact equivalence with the
per-node reference implementation used in tests): per-VN sums accumulate
over check nodes in ascending base-row order starting from 0.0; the
leave-one-out product for slot j is grouped as (t_0...t_{j-1}) *
(t_{j+1}...t_{d-1}) with the prefix built left-to-right and the suffix
right-to-left.

Performance note: the engine owns reusable scratch and cache buffers, so
a forward cache is only valid until the next forward call on the same
engine, and one engine instance must not run concurrent decodes. Use
separate engines (or processes) for parallel work.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp


def _qapply(spec, x, out=None):
    """Quantize an array, returning (values, level buckets)."""
    bucket = np.searchsorted(spec.thresholds, np.abs(x), side="right")
    sign = np.where(x < 0, -1.0, 1.0)
    if out is None:
        out = np.empty_like(x)
    np.multiply(sign, spec.levels[bucket], out=out)
    return out, bucket.astype(np.int16)


def _level_grad_acc(spec, bucket, weighted_g):
    """Sum STE level gradients: one-hot at each sample's bucket."""
    k = spec.levels.shape[0]
    acc = np.bincount(bucket.ravel().astype(np.int64),
                      weights=weighted_g.ravel(), minlength=k)
    return acc[1:]  # q_0 is pinned


def _sign(x):
    return np.where(x < 0, -1.0, 1.0)


class UnrolledEngine:
    """Compiled structure of one IterationPlan plus forward/backward."""

    def __init__(self, plan):
        self.plan = plan
        base = plan.base
        self.m = base.m
        self.n = base.n_cols
        self.d = base.max_row_weight
        vn_idx = np.zeros((self.m, self.d), dtype=np.int64)
        valid = np.zeros((self.m, self.d), dtype=bool)
        for c, row in enumerate(base.rows):
            vn_idx[c, : len(row)] = row
            valid[c, : len(row)] = True
        self.vn_idx = vn_idx
        self.valid = valid
        self.valid3 = valid[:, :, None]
        self.invalid3 = ~self.valid3
        # scatter matrix: S[v] = sum of edge values over valid slots of v,
        # accumulated in ascending (row, slot) order
        flat = np.nonzero(valid.ravel())[0]
        a = sp.csr_matrix(
            (np.ones(flat.shape[0]), (vn_idx.ravel()[flat], flat)),
            shape=(self.n, self.m * self.d),
        )
        a.sort_indices()
        self.a_v = a
        # per-layer compact edge maps (row-major over active rows)
        self.act_rows = []
        self.pad_rows = []
        self.pad_slots = []
        self.keep3 = []
        self.drop3 = []
        for l in range(plan.l_max):
            act = np.nonzero(plan.active[l])[0]
            r, s = np.nonzero(valid[act])
            self.act_rows.append(act)
            self.pad_rows.append(act[r])
            self.pad_slots.append(s)
            keep = plan.active[l][:, None, None] & self.valid3
            self.keep3.append(keep)
            self.drop3.append(~keep)
        self._ws: dict = {}
        self._cache_token = 0

    def _buf(self, name, shape, dtype=np.float64):
        arr = self._ws.get(name)
        if arr is None or arr.shape != shape or arr.dtype != dtype:
            arr = np.empty(shape, dtype=dtype)
            self._ws[name] = arr
        return arr

    # -- weight padding ----------------------------------------------------

    def _pad_edge(self, l, values, name, dtype=np.float64):
        out = self._buf(name, (self.m, self.d), dtype)
        out.fill(0.0)
        out[self.pad_rows[l], self.pad_slots[l]] = values
        return out

    def _pad_row(self, l, values, name, dtype=np.float64):
        out = self._buf(name, (self.m,), dtype)
        out.fill(0.0)
        out[self.act_rows[l]] = values
        return out

    def _wvc_pad(self, weights, l, quant, dtype=np.float64):
        vals = (np.ones(self.pad_rows[l].shape[0]) if weights.w_vc is None
                else weights.w_vc[l])
        bucket = None
        if quant is not None:
            vals, bucket = _qapply(quant.w[l], np.asarray(vals, dtype=np.float64))
        return self._pad_edge(l, vals, "wvc_pad", dtype), bucket

    def _wcn_pad(self, weights, l, dtype=np.float64):
        if weights.cn_mode == "unit":
            return self.plan.active[l].astype(dtype)[:, None]
        if weights.cn_mode == "tied":
            return self._pad_row(l, weights.w_cn[l], "wcn_pad", dtype)[:, None]
        return self._pad_edge(l, weights.w_cn[l], "wcn_pad", dtype)  # untied

    def _beta_pad(self, weights, l, quant, dtype=np.float64):
        vals = np.asarray(weights.offsets[l], dtype=np.float64)
        bucket = None
        if quant is not None:
            vals, bucket = _qapply(quant.beta[l], vals)
        if weights.offset_mode == "cn":
            return self._pad_row(l, vals, "beta_pad", dtype)[:, None], bucket
        return self._pad_edge(l, vals, "beta_pad", dtype), bucket

    def _scatter(self, flat):
        """a_v @ flat in the dtype of ``flat`` (scipy would upcast)."""
        if flat.dtype == np.float64:
            return self.a_v @ flat
        if getattr(self, "_a_v32", None) is None:
            self._a_v32 = self.a_v.astype(np.float32)
        return self._a_v32 @ flat

    # -- forward -----------------------------------------------------------

    def forward(self, weights, variant, mu, quant=None, m_clip=18.0,
                want_cache=False, dtype=np.float64):
        """Run all layers; mu is (n, B). Returns mu_post (L, n, B).

        With ``want_cache`` also returns the buffers the backward pass
        needs; they are only valid until the next forward on this engine.
        ``dtype`` selects the working precision of the message arrays
        (float32 roughly halves the cost; parameters stay float64).
        """
        plan = self.plan
        L = plan.l_max
        dtype = np.dtype(dtype)
        mu = np.ascontiguousarray(mu, dtype=dtype)
        n, B = mu.shape
        m, d = self.m, self.d
        wch = weights.w_ch
        # keep the atanh argument strictly inside (-1, 1) in the working
        # precision (tanh(9) rounds to 1.0 in float32)
        pmax = min(np.tanh(0.5 * m_clip),
                   float(np.nextafter(dtype.type(1.0), dtype.type(0.0))))
        exact = variant == "exact"

        mu_post = np.empty((L, n, B), dtype=dtype)
        layers = []
        s_prev = None
        m_prev = None
        zeros_nb = self._buf("zeros_nb", (n, B), dtype)
        zeros_nb.fill(0.0)
        for l in range(L):
            lay = {}
            if quant is None:
                x = mu
            else:
                x, lay["bucket_ch"] = _qapply(quant.ch[l], mu,
                                              out=self._buf(f"c_x_{l}", (n, B), dtype))
            tot = self._buf(f"c_tot_{l}" if want_cache else "tot", (n, B), dtype)
            if wch is not None:
                np.multiply(wch[l][:, None], x, out=tot)
            else:
                np.copyto(tot, x)
            np.add(tot, s_prev if s_prev is not None else zeros_nb, out=tot)
            ext = self._buf("ext", (m, d, B), dtype)
            np.take(tot, self.vn_idx, axis=0, mode="clip", out=ext)
            if m_prev is not None:
                np.subtract(ext, m_prev, out=ext)
            wvc_pad, bucket_w = self._wvc_pad(weights, l, quant, dtype)
            lay["bucket_w"] = bucket_w
            mu_vc = self._buf(f"c_mu_vc_{l}" if want_cache else "mu_vc",
                              (m, d, B), dtype)
            np.multiply(wvc_pad[:, :, None], ext, out=mu_vc)
            np.clip(mu_vc, -m_clip, m_clip, out=mu_vc)
            if quant is None:
                mvq = mu_vc
            else:
                mvq, lay["bucket_vc"] = _qapply(
                    quant.vc[l], mu_vc,
                    out=self._buf(f"c_mvq_{l}" if want_cache else "mvq",
                                  (m, d, B), dtype))

            out = self._buf("cn_out", (m, d, B), dtype)
            if exact:
                t = self._buf("t", (m, d, B), dtype)
                np.multiply(mvq, 0.5, out=t)
                np.tanh(t, out=t)
                np.copyto(t, 1.0, where=self.invalid3)
                pr = self._buf("pr", (m, d, B), dtype)
                srb = self._buf("sr", (m, d, B), dtype)
                pr[:, 0].fill(1.0)
                for j in range(1, d):
                    np.multiply(pr[:, j - 1], t[:, j - 1], out=pr[:, j])
                srb[:, d - 1].fill(1.0)
                for j in range(d - 2, -1, -1):
                    np.multiply(srb[:, j + 1], t[:, j + 1], out=srb[:, j])
                np.multiply(pr, srb, out=pr)        # p, aliases pr
                np.clip(pr, -pmax, pmax, out=pr)    # pc
                raw = self._buf("raw", (m, d, B), dtype)
                np.arctanh(pr, out=raw)
                np.multiply(raw, 2.0, out=raw)
                # clamp to the leave-one-out min magnitude: a no-op in
                # exact arithmetic, removes the atanh rounding overshoot
                # so the min-sum rule dominates this one exactly
                abs_a = self._buf("abs_a", (m, d, B), dtype)
                np.abs(mvq, out=abs_a)
                np.copyto(abs_a, np.inf, where=self.invalid3)
                i1 = np.argmin(abs_a, axis=1, keepdims=True)
                m1 = np.take_along_axis(abs_a, i1, axis=1)
                np.put_along_axis(abs_a, i1, np.inf, axis=1)
                m2 = np.min(abs_a, axis=1, keepdims=True)
                slots = np.arange(d)[None, :, None]
                minx = self._buf("minx", (m, d, B), dtype)
                np.copyto(minx, np.where(slots == i1, m2, m1))
                np.clip(raw, -minx, minx, out=raw)
                wcn_pad = self._wcn_pad(weights, l, dtype)
                wpad3 = wcn_pad[:, :, None] if wcn_pad.ndim == 2 else wcn_pad
                np.multiply(wpad3, raw, out=out)
            else:
                abs_a = self._buf("abs_a", (m, d, B), dtype)
                np.abs(mvq, out=abs_a)
                np.copyto(abs_a, np.inf, where=self.invalid3)
                sgn = self._buf("sgn", (m, d, B), dtype)
                np.copyto(sgn, np.where(mvq < 0, -1.0, 1.0))
                np.copyto(sgn, 1.0, where=self.invalid3)
                sp_all = np.prod(sgn, axis=1, keepdims=True)
                i1 = np.argmin(abs_a, axis=1, keepdims=True)
                m1 = np.take_along_axis(abs_a, i1, axis=1)
                np.put_along_axis(abs_a, i1, np.inf, axis=1)
                i2 = np.argmin(abs_a, axis=1, keepdims=True)
                m2 = np.take_along_axis(abs_a, i2, axis=1)
                lay.update(i1=i1, i2=i2, m1=m1, m2=m2)
                slots = np.arange(d)[None, :, None]
                minx = self._buf("minx", (m, d, B), dtype)
                np.copyto(minx, np.where(slots == i1, m2, m1))
                if variant == "minsum":
                    mag = minx
                else:
                    beta_pad, bucket_b = self._beta_pad(weights, l, quant, dtype)
                    lay["bucket_b"] = bucket_b
                    bpad3 = beta_pad[:, :, None] if beta_pad.ndim == 2 else beta_pad
                    np.subtract(minx, bpad3, out=minx)
                    np.maximum(minx, 0.0, out=minx)
                    mag = minx
                np.multiply(sp_all, sgn, out=sgn)   # sgx, aliases sgn
                np.multiply(sgn, mag, out=out)
            mu_cv = self._buf(f"c_mu_cv_{l}" if want_cache else
                              f"mu_cv_{l % 2}", (m, d, B), dtype)
            np.clip(out, -m_clip, m_clip, out=mu_cv)
            np.copyto(mu_cv, 0.0, where=self.drop3[l])
            if quant is None:
                mcq = mu_cv
            else:
                mcq, lay["bucket_cv"] = _qapply(
                    quant.cv[l], mu_cv,
                    out=self._buf(f"c_mcq_{l}" if want_cache else
                                  f"mcq_{l % 2}", (m, d, B), dtype))
                np.copyto(mcq, 0.0, where=self.drop3[l])
            s_cur = self._scatter(mcq.reshape(m * d, B))
            if wch is not None:
                np.multiply(wch[l + 1][:, None], x, out=mu_post[l])
            else:
                np.copyto(mu_post[l], x)
            np.add(mu_post[l], s_cur, out=mu_post[l])
            if want_cache:
                lay["x"] = x
                layers.append(lay)
            s_prev, m_prev = s_cur, mcq
        if want_cache:
            self._cache_token += 1
            cache = {"mu": mu, "layers": layers, "m_clip": m_clip,
                     "variant": variant, "quant": quant, "pmax": pmax,
                     "dtype": dtype, "token": self._cache_token}
            return mu_post, cache
        return mu_post

    # -- backward ----------------------------------------------------------

    def backward(self, weights, cache, gpost, train_levels=False):
        """Reverse pass from per-layer adjoints of mu_post.

        Returns a dict with one gradient array per stored parameter array
        of ``weights`` and, when ``train_levels``, per-layer quantizer
        level gradients under key 'qlevels'. Consumes the cache of the
        immediately preceding forward call on this engine. Clips count as
        identity inside their range; the sub-ULP min-magnitude clamp of
        the exact CN update is treated as identity outright.
        """
        if cache.get("token") != self._cache_token:
            raise RuntimeError("stale forward cache: another forward ran "
                               "on this engine in between")
        plan = self.plan
        L = plan.l_max
        m, d, n = self.m, self.d, self.n
        mu = cache["mu"]
        B = mu.shape[1]
        quant = cache["quant"]
        variant = cache["variant"]
        m_clip = cache["m_clip"]
        pmax = cache["pmax"]
        dtype = cache["dtype"]
        wch = weights.w_ch
        exact = variant == "exact"

        grads = {}
        if wch is not None:
            grads["w_ch"] = np.zeros_like(wch)
        if weights.w_vc is not None:
            grads["w_vc"] = [np.zeros_like(a) for a in weights.w_vc]
        if weights.w_cn is not None:
            grads["w_cn"] = [np.zeros_like(a) for a in weights.w_cn]
        if weights.offsets is not None:
            grads["offsets"] = [np.zeros_like(a) for a in weights.offsets]
        qgrads = {}

        def acc_levels(family, l, spec, bucket, g, x_sign):
            if not (train_levels and spec.trainable):
                return
            key = (family, l)
            g_lv = _level_grad_acc(spec, bucket, g * x_sign)
            if key in qgrads:
                qgrads[key] += g_lv
            else:
                qgrads[key] = g_lv

        zeros_mdb = self._buf("zeros_mdb", (m, d, B), dtype)
        zeros_mdb.fill(0.0)
        carry = self._buf("carry", (m, d, B), dtype)
        have_carry = False
        for l in range(L - 1, -1, -1):
            lay = cache["layers"][l]
            x = lay["x"]
            mu_vc = self._ws[f"c_mu_vc_{l}"]
            mvq = self._ws[f"c_mvq_{l}"] if quant is not None else mu_vc
            mu_cv = self._ws[f"c_mu_cv_{l}"]
            m_prev = (self._ws[f"c_mcq_{l - 1}"] if quant is not None else
                      self._ws[f"c_mu_cv_{l - 1}"]) if l > 0 else zeros_mdb

            g_mcq = self._buf("g_mcq", (m, d, B), dtype)
            np.take(gpost[l], self.vn_idx, axis=0, mode="clip", out=g_mcq)
            if have_carry:
                np.add(g_mcq, carry, out=g_mcq)
            np.copyto(g_mcq, 0.0, where=self.drop3[l])

            if wch is not None:
                grads["w_ch"][l + 1] += (gpost[l] * x).sum(axis=1)
            g_x = gpost[l] * (wch[l + 1][:, None] if wch is not None else 1.0)

            if quant is not None:
                acc_levels("cv", l, quant.cv[l], lay["bucket_cv"],
                           g_mcq, _sign(mu_cv))
            # STE through Q_cv, then the output clip gate
            g_out = self._buf("g_out", (m, d, B), dtype)
            np.multiply(g_mcq, np.abs(mu_cv) < m_clip, out=g_out)

            g_mvq = self._buf("g_mvq", (m, d, B), dtype)
            if exact:
                # recompute t, leave-one-out products and the atanh output
                t = self._buf("t", (m, d, B), dtype)
                np.multiply(mvq, 0.5, out=t)
                np.tanh(t, out=t)
                np.copyto(t, 1.0, where=self.invalid3)
                pr = self._buf("pr", (m, d, B), dtype)
                srb = self._buf("sr", (m, d, B), dtype)
                pr[:, 0].fill(1.0)
                for j in range(1, d):
                    np.multiply(pr[:, j - 1], t[:, j - 1], out=pr[:, j])
                srb[:, d - 1].fill(1.0)
                for j in range(d - 2, -1, -1):
                    np.multiply(srb[:, j + 1], t[:, j + 1], out=srb[:, j])
                pc = self._buf("pc", (m, d, B), dtype)
                np.multiply(pr, srb, out=pc)
                np.clip(pc, -pmax, pmax, out=pc)
                raw = self._buf("raw", (m, d, B), dtype)
                np.arctanh(pc, out=raw)
                np.multiply(raw, 2.0, out=raw)
                wcn_pad = self._wcn_pad(weights, l, dtype)
                if weights.cn_mode == "tied":
                    g_wcn_row = (g_out * raw).sum(axis=(1, 2))
                    grads["w_cn"][l] += g_wcn_row[self.act_rows[l]]
                elif weights.cn_mode == "untied":
                    g_wcn_edge = (g_out * raw).sum(axis=2)
                    grads["w_cn"][l] += g_wcn_edge[self.pad_rows[l],
                                                   self.pad_slots[l]]
                wpad3 = wcn_pad[:, :, None] if wcn_pad.ndim == 2 else wcn_pad
                g_pc = raw  # reuse buffer: raw no longer needed
                np.multiply(g_out, wpad3, out=g_pc)
                dgate = np.abs(pc) < pmax
                np.multiply(pc, pc, out=pc)
                np.subtract(1.0, pc, out=pc)
                np.divide(2.0, pc, out=pc)
                np.multiply(g_pc, pc, out=g_pc)
                np.multiply(g_pc, dgate, out=g_pc)
                # dual prefix/suffix: exact, zero-safe grad of the
                # product-except-self
                pd = self._buf("pd", (m, d, B), dtype)
                sd = self._buf("sd", (m, d, B), dtype)
                pd[:, 0].fill(0.0)
                for j in range(1, d):
                    np.multiply(pd[:, j - 1], t[:, j - 1], out=pd[:, j])
                    pd[:, j] += pr[:, j - 1] * g_pc[:, j - 1]
                sd[:, d - 1].fill(0.0)
                for j in range(d - 2, -1, -1):
                    np.multiply(sd[:, j + 1], t[:, j + 1], out=sd[:, j])
                    sd[:, j] += srb[:, j + 1] * g_pc[:, j + 1]
                np.multiply(pr, sd, out=g_mvq)
                g_mvq += pd * srb
                # d tanh(mvq/2)/d mvq = (1 - t^2)/2
                np.multiply(t, t, out=t)
                np.subtract(1.0, t, out=t)
                np.multiply(t, 0.5, out=t)
                np.multiply(g_mvq, t, out=g_mvq)
                np.copyto(g_mvq, 0.0, where=self.invalid3)
            else:
                i1, i2, m1, m2 = lay["i1"], lay["i2"], lay["m1"], lay["m2"]
                sgn = self._buf("sgn", (m, d, B), dtype)
                np.copyto(sgn, np.where(mvq < 0, -1.0, 1.0))
                np.copyto(sgn, 1.0, where=self.invalid3)
                sp_all = np.prod(sgn, axis=1, keepdims=True)
                slots = np.arange(d)[None, :, None]
                minx = self._buf("minx", (m, d, B), dtype)
                np.copyto(minx, np.where(slots == i1, m2, m1))
                g_mag = self._buf("g_mag", (m, d, B), dtype)
                np.multiply(g_out, sp_all, out=g_mag)
                np.multiply(g_mag, sgn, out=g_mag)
                if variant == "minsum":
                    g_minx = g_mag
                else:
                    beta_pad, _ = self._beta_pad(weights, l, quant, dtype)
                    bpad3 = beta_pad[:, :, None] if beta_pad.ndim == 2 else beta_pad
                    np.subtract(minx, bpad3, out=minx)
                    rgate = minx > 0
                    np.multiply(g_mag, rgate, out=g_mag)
                    g_minx = g_mag
                    if weights.offset_mode == "cn":
                        g_b = -g_minx.sum(axis=(1, 2))[self.act_rows[l]]
                    else:
                        g_b = -g_minx.sum(axis=2)[self.pad_rows[l],
                                                  self.pad_slots[l]]
                    if quant is not None:
                        acc_levels("beta", l, quant.beta[l], lay["bucket_b"],
                                   g_b, _sign(weights.offsets[l]))
                    grads["offsets"][l] += g_b
                total = g_minx.sum(axis=1, keepdims=True)
                g_to_min1 = total - np.take_along_axis(g_minx, i1, axis=1)
                g_to_min2 = np.take_along_axis(g_minx, i1, axis=1)
                g_mvq.fill(0.0)
                np.put_along_axis(g_mvq, i1, g_to_min1, axis=1)
                cur = np.take_along_axis(g_mvq, i2, axis=1)
                np.put_along_axis(g_mvq, i2, cur + g_to_min2, axis=1)
                np.multiply(g_mvq, sgn, out=g_mvq)
                np.copyto(g_mvq, 0.0, where=self.invalid3)

            if quant is not None:
                acc_levels("vc", l, quant.vc[l], lay["bucket_vc"],
                           g_mvq, _sign(mu_vc))
            # STE through Q_vc, then the VN clip gate
            g_pre = g_mvq
            np.multiply(g_pre, np.abs(mu_vc) < m_clip, out=g_pre)

            # recompute ext = tot[vn] - m_prev
            ext = self._buf("ext", (m, d, B), dtype)
            np.take(self._ws[f"c_tot_{l}"], self.vn_idx, axis=0,
                    mode="clip", out=ext)
            np.subtract(ext, m_prev, out=ext)
            np.multiply(g_pre, ext, out=ext)        # g_pre * ext, aliases ext
            g_wvcq = ext.sum(axis=2)[self.pad_rows[l], self.pad_slots[l]]
            if weights.w_vc is not None:
                if quant is not None:
                    acc_levels("w", l, quant.w[l], lay["bucket_w"],
                               g_wvcq, _sign(weights.w_vc[l]))
                grads["w_vc"][l] += g_wvcq          # STE through Q_w
            wvc_pad, _ = self._wvc_pad(weights, l, quant, dtype)
            g_ext = g_pre
            np.multiply(g_pre, wvc_pad[:, :, None], out=g_ext)

            g_tot = self._scatter(g_ext.reshape(m * d, B))
            if wch is not None:
                grads["w_ch"][l] += (g_tot * x).sum(axis=1)
                g_x += g_tot * wch[l][:, None]
            else:
                g_x += g_tot
            if quant is not None:
                acc_levels("ch", l, quant.ch[l], lay["bucket_ch"],
                           g_x, _sign(mu))
            np.take(g_tot, self.vn_idx, axis=0, mode="clip", out=carry)
            np.subtract(carry, g_ext, out=carry)
            have_carry = True
        grads["qlevels"] = qgrads
        return grads


def collect_layer_samples(decoder, mu):
    """Per-layer message/channel samples from one float forward pass.

    Used to calibrate Lloyd-Max quantizers. Returns flat arrays of the
    values each quantizer family would see, restricted to real (active,
    valid) edges.
    """
    mu = np.asarray(mu, dtype=np.float64)
    if mu.ndim == 1:
        mu = mu[:, None]
    eng = decoder.engine()
    _, cache = eng.forward(decoder.weights, decoder.variant, mu,
                           quant=None, m_clip=decoder.m_clip, want_cache=True)
    out = {"ch": [], "vc": [], "cv": []}
    for l in range(decoder.plan.l_max):
        keep = eng.keep3[l]
        mu_vc = eng._ws[f"c_mu_vc_{l}"]
        mu_cv = eng._ws[f"c_mu_cv_{l}"]
        sel = np.broadcast_to(keep, mu_vc.shape)
        out["ch"].append(mu.ravel().copy())
        out["vc"].append(mu_vc[sel].copy())
        out["cv"].append(mu_cv[sel].copy())
    return out
