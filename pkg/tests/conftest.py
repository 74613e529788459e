from resilmoe.core import (
    Request, RequestState, aggregate, attention_forward, embed_token, emit_token,
    expert_forward, select_experts,
)
from resilmoe.harness.cluster import make_requests
from resilmoe.harness.scenario import from_mapping

MS = 1_000_000


def reference_tokens(cfg, req: Request) -> list[int]:
    """Single-process decode of one request with the same kernels, no network."""
    st = RequestState(req)
    L, P = cfg.num_layers, req.prompt_len

    def layer_pass(layer, pos, x):
        out, _ = attention_forward(cfg, st, layer, x, position=pos)
        gates = select_experts(cfg, req.id, pos, layer)
        return aggregate([expert_forward(e, layer, out) for e, _ in gates], [w for _, w in gates])

    hidden = {pos: embed_token(cfg, t) for pos, t in enumerate(req.prompt_token_ids, 1)}
    for layer in range(1, L + 1):
        for pos in range(1, P + 1):
            hidden[pos] = layer_pass(layer, pos, hidden[pos])
    tok = emit_token(hidden[P])
    out = []
    for i in range(1, req.max_new_tokens + 1):
        h = embed_token(cfg, tok)
        for layer in range(1, L + 1):
            h = layer_pass(layer, P + i, h)
        tok = emit_token(h)
        out.append(tok)
    return out


def small(**over):
    """A small, fast scenario; keyword groups are merged one level deep."""
    base = {
        "seed": 1, "duration": 600 * MS,
        "cluster": {"aws": 2, "ews": 2},
        "timing": {"t_w": 50 * MS},
        "workload": {"num_requests": 4, "rate": 50, "max_new_tokens": 16},
    }
    for k, v in over.items():
        base[k] = {**base[k], **v} if isinstance(v, dict) and isinstance(base.get(k), dict) else v
    return from_mapping(base)


def expected_tokens(sc):
    return {req.id: reference_tokens(sc.model, req) for _, req in make_requests(sc)}


ACCEPTANCE: list[str] = []


def verdict(n: int, name: str, ok: bool, detail: str) -> None:
    """Record one acceptance line, then fail the test if the criterion is not met."""
    line = f"criterion {n:>2} {'PASS' if ok else 'FAIL'}  {name}: {detail}"
    ACCEPTANCE.append(line)
    print(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
