"""Hot loops of the recommender: per-example loss/gradient, one SGD epoch,
gradient projections, and trie-constrained beam search.

Every function is plain numpy over flat arrays so it compiles with numba and
also runs unmodified as the reference path (``SIDBIAS_DISABLE_NUMBA=1``).

Array conventions
-----------------
A, E      (V, dm)      input / output token embeddings
Wp        (P, dm, dm)  prefix-position projections
Wh        (dm, dm)     history projection
b         (dm,)        bias
sid_ptr, sid_tok       CSR SIDs per item (no EOS)
allowed, allowed_cnt   training candidate tokens per position (padded with -1)
und_ptr, und_items     CSR undesired head items per item (empty for heads)
ex_ptr, ex_hist        CSR history items per example; ex_target per example
"""
import numpy as np

from .._accel import njit


@njit
def history_mean(A, sid_ptr, sid_tok, hist, hbar):
    dm = A.shape[1]
    for t in range(dm):
        hbar[t] = 0.0
    n = 0
    for h in hist:
        for k in range(sid_ptr[h], sid_ptr[h + 1]):
            tok = sid_tok[k]
            for t in range(dm):
                hbar[t] += A[tok, t]
            n += 1
    if n > 0:
        for t in range(dm):
            hbar[t] /= n
    return n


@njit
def item_path(item, sid_ptr, sid_tok, eos, out):
    n = sid_ptr[item + 1] - sid_ptr[item]
    for k in range(n):
        out[k] = sid_tok[sid_ptr[item] + k]
    out[n] = eos
    return n + 1


@njit
def path_loss(A, E, Wp, base, path, npath, allowed, allowed_cnt, unlikely, eps, scale,
              do_grad, gA, gE, gWp, ds_total, logit):
    """Loss of one EOS-terminated path; accumulates gradients when ``do_grad``.

    ``unlikely=False``: sum of -log P(token) (clamped at eps).
    ``unlikely=True``:  sum of -log(1 - P(token)) with P clamped at 1 - eps.
    ``ds_total`` receives the summed pre-activation gradient, which the caller
    routes into ``Wh``, ``b`` and the history embeddings.
    """
    dm = A.shape[1]
    u = np.zeros(dm)
    ds_steps = np.zeros((npath, dm))
    log_eps = np.log(eps)
    loss = 0.0
    for i in range(npath):
        tok = path[i]
        X = np.tanh(base + u)
        cnt = allowed_cnt[i]
        mx = -np.inf
        ti = -1
        for a in range(cnt):
            c = allowed[i, a]
            z = 0.0
            for t in range(dm):
                z += E[c, t] * X[t]
            logit[a] = z
            if z > mx:
                mx = z
            if c == tok:
                ti = a
        if ti < 0:
            raise ValueError("path token outside the allowed set")
        ssum = 0.0
        for a in range(cnt):
            ssum += np.exp(logit[a] - mx)
        lse = mx + np.log(ssum)
        logp = logit[ti] - lse
        p = np.exp(logp)
        active = True
        if not unlikely:
            if logp >= log_eps:
                loss -= logp
            else:
                loss -= log_eps
                active = False
        else:
            if p <= 1.0 - eps:
                loss -= np.log1p(-p)
            else:
                loss -= log_eps
                active = False
        if do_grad and active:
            dX = np.zeros(dm)
            ratio = p / (1.0 - p) if unlikely else 0.0
            for a in range(cnt):
                c = allowed[i, a]
                pc = np.exp(logit[a] - lse)
                ind = 1.0 if a == ti else 0.0
                if unlikely:
                    g = ratio * (ind - pc)
                else:
                    g = pc - ind
                g *= scale
                for t in range(dm):
                    gE[c, t] += g * X[t]
                    dX[t] += g * E[c, t]
            for t in range(dm):
                ds_steps[i, t] = dX[t] * (1.0 - X[t] * X[t])
        if i < npath - 1:
            u += np.dot(Wp[i], A[tok])
    if do_grad:
        D = np.zeros(dm)
        for j in range(npath - 1, -1, -1):
            if j < npath - 1:
                tok = path[j]
                gWp[j] += np.outer(D, A[tok])
                gA[tok] += np.dot(Wp[j].T, D)
            D += ds_steps[j]
        ds_total += D
    return loss


@njit
def example_loss_grad(A, E, Wp, Wh, b, hist, target, sid_ptr, sid_tok, eos,
                      allowed, allowed_cnt, und_ptr, und_items, alpha, eps, scale,
                      do_grad, gA, gE, gWp, gWh, gb):
    """``(nll, auo)`` of one training example; gradient of ``scale*(nll + alpha*auo)``."""
    dm = A.shape[1]
    hbar = np.zeros(dm)
    nh = history_mean(A, sid_ptr, sid_tok, hist, hbar)
    base = np.dot(Wh, hbar) + b
    ds_total = np.zeros(dm)
    path = np.empty(allowed.shape[0], dtype=np.int64)
    logit = np.empty(allowed.shape[1])
    n = item_path(target, sid_ptr, sid_tok, eos, path)
    nll = path_loss(A, E, Wp, base, path, n, allowed, allowed_cnt, False, eps, scale,
                    do_grad, gA, gE, gWp, ds_total, logit)
    auo = 0.0
    grad_auo = do_grad and alpha != 0.0
    for k in range(und_ptr[target], und_ptr[target + 1]):
        n = item_path(und_items[k], sid_ptr, sid_tok, eos, path)
        auo += path_loss(A, E, Wp, base, path, n, allowed, allowed_cnt, True, eps, scale * alpha,
                         grad_auo, gA, gE, gWp, ds_total, logit)
    if do_grad:
        gb += ds_total
        gWh += np.outer(ds_total, hbar)
        if nh > 0:
            dh = np.dot(Wh.T, ds_total) / nh
            for h in hist:
                for k in range(sid_ptr[h], sid_ptr[h + 1]):
                    gA[sid_tok[k]] += dh
    return nll, auo


@njit
def batch_loss_grad(A, E, Wp, Wh, b, idx, ex_ptr, ex_hist, ex_target, sid_ptr, sid_tok, eos,
                    allowed, allowed_cnt, und_ptr, und_items, alpha, eps, do_grad,
                    gA, gE, gWp, gWh, gb, nll_out, auo_out):
    """Per-example losses for ``idx``; gradient of the batch mean of nll + alpha*auo."""
    scale = 1.0 / max(len(idx), 1)
    for k in range(len(idx)):
        e = idx[k]
        hist = ex_hist[ex_ptr[e]:ex_ptr[e + 1]]
        nll, auo = example_loss_grad(A, E, Wp, Wh, b, hist, ex_target[e], sid_ptr, sid_tok, eos,
                                     allowed, allowed_cnt, und_ptr, und_items, alpha, eps, scale,
                                     do_grad, gA, gE, gWp, gWh, gb)
        nll_out[k] = nll
        auo_out[k] = auo


@njit
def train_epoch(A, E, Wp, Wh, b, vA, vE, vWp, vWh, vb, order, batch_size, lr, momentum,
                ex_ptr, ex_hist, ex_target, sid_ptr, sid_tok, eos, allowed, allowed_cnt,
                und_ptr, und_items, alpha, eps):
    """One pass of SGD with momentum over ``order``; returns summed (nll, auo)."""
    gA = np.zeros_like(A)
    gE = np.zeros_like(E)
    gWp = np.zeros_like(Wp)
    gWh = np.zeros_like(Wh)
    gb = np.zeros_like(b)
    tot_nll = 0.0
    tot_auo = 0.0
    n = len(order)
    for start in range(0, n, batch_size):
        stop = min(start + batch_size, n)
        scale = 1.0 / (stop - start)
        gA[:] = 0.0
        gE[:] = 0.0
        gWp[:] = 0.0
        gWh[:] = 0.0
        gb[:] = 0.0
        for k in range(start, stop):
            e = order[k]
            hist = ex_hist[ex_ptr[e]:ex_ptr[e + 1]]
            nll, auo = example_loss_grad(A, E, Wp, Wh, b, hist, ex_target[e], sid_ptr, sid_tok, eos,
                                         allowed, allowed_cnt, und_ptr, und_items, alpha, eps, scale,
                                         True, gA, gE, gWp, gWh, gb)
            tot_nll += nll
            tot_auo += auo
        vA *= momentum
        vA -= lr * gA
        A += vA
        vE *= momentum
        vE -= lr * gE
        E += vE
        vWp *= momentum
        vWp -= lr * gWp
        Wp += vWp
        vWh *= momentum
        vWh -= lr * gWh
        Wh += vWh
        vb *= momentum
        vb -= lr * gb
        b += vb
        if not np.isfinite(tot_nll):
            break
    return tot_nll, tot_auo


@njit
def nll_projections(A, E, Wp, Wh, b, idx, ex_ptr, ex_hist, ex_target, sid_ptr, sid_tok, eos,
                    allowed, allowed_cnt, proj, target_count):
    """Accumulate <-dL_nll/de_c, X> = (1{c=target} - P_c) * |X|^2 for every candidate c."""
    dm = A.shape[1]
    hbar = np.zeros(dm)
    path = np.empty(allowed.shape[0], dtype=np.int64)
    logit = np.empty(allowed.shape[1])
    for k in range(len(idx)):
        e = idx[k]
        hist = ex_hist[ex_ptr[e]:ex_ptr[e + 1]]
        history_mean(A, sid_ptr, sid_tok, hist, hbar)
        base = np.dot(Wh, hbar) + b
        n = item_path(ex_target[e], sid_ptr, sid_tok, eos, path)
        u = np.zeros(dm)
        for i in range(n):
            X = np.tanh(base + u)
            xx = np.dot(X, X)
            cnt = allowed_cnt[i]
            mx = -np.inf
            for a in range(cnt):
                z = np.dot(E[allowed[i, a]], X)
                logit[a] = z
                if z > mx:
                    mx = z
            ssum = 0.0
            for a in range(cnt):
                ssum += np.exp(logit[a] - mx)
            for a in range(cnt):
                c = allowed[i, a]
                pc = np.exp(logit[a] - mx) / ssum
                ind = 1.0 if c == path[i] else 0.0
                proj[c] += (ind - pc) * xx
            target_count[path[i]] += 1
            if i < n - 1:
                u += np.dot(Wp[i], A[path[i]])


@njit
def beam_search(A, E, Wp, Wh, b, hist, sid_ptr, sid_tok, child_ptr, child_tok, child_node,
                node_item, eos, beam_width, K, exclude_hist, out_items, out_scores):
    """Trie-constrained beam search for one history.

    Hypothesis score is the summed token log-probability including EOS, with
    no length normalization.  Completed hypotheses are ranked by score, then
    by ascending item ID.  With ``exclude_hist`` the EOS edges of items already
    in the history are masked out.  Returns the number of items written.
    """
    dm = A.shape[1]
    hbar = np.zeros(dm)
    history_mean(A, sid_ptr, sid_tok, hist, hbar)
    base = np.dot(Wh, hbar) + b

    max_children = 0
    for nd in range(len(child_ptr) - 1):
        w = child_ptr[nd + 1] - child_ptr[nd]
        if w > max_children:
            max_children = w
    depth_cap = Wp.shape[0] + 1
    cap_c = beam_width * (depth_cap + 1) + 1
    comp_item = np.empty(cap_c, dtype=np.int64)
    comp_score = np.empty(cap_c)
    n_comp = 0

    beam_node = np.zeros(beam_width, dtype=np.int64)
    beam_score = np.zeros(beam_width)
    beam_u = np.zeros((beam_width, dm))
    beam_depth = np.zeros(beam_width, dtype=np.int64)
    n_active = 1

    cand_cap = beam_width * max_children + 1
    cand_beam = np.empty(cand_cap, dtype=np.int64)
    cand_node = np.empty(cand_cap, dtype=np.int64)
    cand_tok = np.empty(cand_cap, dtype=np.int64)
    cand_score = np.empty(cand_cap)
    logit = np.empty(max_children + 1)
    kth = np.empty(cap_c)

    while n_active > 0:
        n_cand = 0
        for bi in range(n_active):
            nd = beam_node[bi]
            a0 = child_ptr[nd]
            a1 = child_ptr[nd + 1]
            X = np.tanh(base + beam_u[bi])
            mx = -np.inf
            for a in range(a0, a1):
                z = np.dot(E[child_tok[a]], X)
                logit[a - a0] = z
                if z > mx:
                    mx = z
            ssum = 0.0
            for a in range(a0, a1):
                ssum += np.exp(logit[a - a0] - mx)
            lse = mx + np.log(ssum)
            for a in range(a0, a1):
                sc = beam_score[bi] + logit[a - a0] - lse
                if child_tok[a] == eos:
                    it = node_item[child_node[a]]
                    if exclude_hist:
                        seen = False
                        for h in hist:
                            if h == it:
                                seen = True
                                break
                        if seen:
                            continue
                    comp_item[n_comp] = it
                    comp_score[n_comp] = sc
                    n_comp += 1
                else:
                    cand_beam[n_cand] = bi
                    cand_node[n_cand] = child_node[a]
                    cand_tok[n_cand] = child_tok[a]
                    cand_score[n_cand] = sc
                    n_cand += 1
        if n_cand == 0:
            break
        # every extension only lowers the score: stop once no candidate can enter the top K
        if n_comp >= K:
            kth[:n_comp] = comp_score[:n_comp]
            kth_sorted = np.sort(kth[:n_comp])
            if np.max(cand_score[:n_cand]) < kth_sorted[n_comp - K]:
                break
        order = np.argsort(-cand_score[:n_cand], kind="mergesort")
        n_new = min(beam_width, n_cand)
        new_node = np.empty(n_new, dtype=np.int64)
        new_score = np.empty(n_new)
        new_u = np.empty((n_new, dm))
        new_depth = np.empty(n_new, dtype=np.int64)
        for r in range(n_new):
            c = order[r]
            bi = cand_beam[c]
            new_node[r] = cand_node[c]
            new_score[r] = cand_score[c]
            new_u[r] = beam_u[bi] + np.dot(Wp[beam_depth[bi]], A[cand_tok[c]])
            new_depth[r] = beam_depth[bi] + 1
        for r in range(n_new):
            beam_node[r] = new_node[r]
            beam_score[r] = new_score[r]
            beam_u[r] = new_u[r]
            beam_depth[r] = new_depth[r]
        n_active = n_new

    by_item = np.argsort(comp_item[:n_comp], kind="mergesort")
    by_score = np.argsort(-comp_score[:n_comp][by_item], kind="mergesort")
    n_out = min(K, n_comp)
    for r in range(n_out):
        j = by_item[by_score[r]]
        out_items[r] = comp_item[j]
        out_scores[r] = comp_score[j]
    return n_out


@njit
def beam_search_batch(A, E, Wp, Wh, b, ex_ptr, ex_hist, sid_ptr, sid_tok, child_ptr, child_tok,
                      child_node, node_item, eos, beam_width, K, exclude_hist, out_items, out_scores, out_n):
    for e in range(len(ex_ptr) - 1):
        hist = ex_hist[ex_ptr[e]:ex_ptr[e + 1]]
        out_n[e] = beam_search(A, E, Wp, Wh, b, hist, sid_ptr, sid_tok, child_ptr, child_tok,
                               child_node, node_item, eos, beam_width, K, exclude_hist, out_items[e],
                               out_scores[e])
