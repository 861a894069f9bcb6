import torch

from dtr.seq2seq import ModelConfig, Seq2SeqModel, init_parameters


def _mini_model():
    cfg = ModelConfig(vocab_size=3, hidden=2, layers=1, heads=1, ff=2, dropout=0.0, max_len=8)
    torch.manual_seed(11)
    model = Seq2SeqModel(cfg)
    init_parameters(model)
    # float64 keeps finite-difference noise far below the 1e-3 bar
    model.double()
    model.eval()
    return model


def _loss(model, src, tgt):
    loss_sum, _ = model.loss_on_batch(src, tgt, pad_id=0)
    return loss_sum


def test_analytic_gradients_match_central_differences():
    model = _mini_model()
    n_params = sum(p.numel() for p in model.parameters())
    assert n_params <= 100

    src = torch.tensor([[1, 2, 1], [2, 1, 0]])
    tgt = torch.tensor([[2, 1, 2], [1, 2, 0]])

    model.zero_grad()
    _loss(model, src, tgt).backward()
    analytic = {name: p.grad.clone() for name, p in model.named_parameters()}

    h = 1e-5
    worst = 0.0
    with torch.no_grad():
        for name, param in model.named_parameters():
            grad = analytic[name]
            flat = param.view(-1)
            for idx in range(flat.numel()):
                keep = flat[idx].item()
                flat[idx] = keep + h
                up = _loss(model, src, tgt).item()
                flat[idx] = keep - h
                down = _loss(model, src, tgt).item()
                flat[idx] = keep
                numeric = (up - down) / (2 * h)
                a = grad.view(-1)[idx].item()
                rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
                worst = max(worst, rel)
                assert rel <= 1e-3, f"{name}[{idx}]: analytic {a} vs numeric {numeric} (rel {rel:.2e})"
    assert worst <= 1e-3


def test_gradients_flow_to_every_parameter():
    model = _mini_model()
    src = torch.tensor([[1, 2, 1]])
    tgt = torch.tensor([[2, 1, 2]])
    model.zero_grad()
    _loss(model, src, tgt).backward()
    missing = [name for name, p in model.named_parameters() if p.grad is None]
    assert missing == []
