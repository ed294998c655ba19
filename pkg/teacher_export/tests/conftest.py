import string
import sys
from pathlib import Path

import pytest
import torch
from transformers import BertConfig, BertModel, BertTokenizer

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

DATA = Path(__file__).parent / "data" / "sentiment100.tsv"


def build_vocab(dataset: Path) -> dict[str, int]:
    """WordPiece vocabulary covering the dataset's words plus specials."""
    words = set()
    for line in dataset.read_text().splitlines()[1:]:
        text = line.split("\t")[0].lower()
        words.update(text.translate(str.maketrans("", "", string.punctuation)).split())
    tokens = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"] + sorted(words)
    return {tok: i for i, tok in enumerate(tokens)}


@pytest.fixture(scope="session")
def dataset_path() -> Path:
    return DATA


@pytest.fixture(scope="session")
def finetuned_model_dir(tmp_path_factory, dataset_path) -> Path:
    """A 12-layer transformer, lightly fine-tuned on the sample task, saved
    to a local directory loadable by AutoModel/AutoTokenizer."""
    torch.manual_seed(0)
    root = tmp_path_factory.mktemp("model")
    tokenizer = BertTokenizer(vocab=build_vocab(dataset_path), do_lower_case=True)
    config = BertConfig(
        vocab_size=tokenizer.vocab_size,
        hidden_size=32,
        num_hidden_layers=12,
        num_attention_heads=4,
        intermediate_size=64,
        max_position_embeddings=64,
    )
    model = BertModel(config)

    rows = [line.split("\t") for line in dataset_path.read_text().splitlines()[1:]]
    texts = [r[0] for r in rows]
    labels = torch.tensor([int(r[1]) for r in rows])
    encoded = tokenizer(texts, padding=True, truncation=True, max_length=32,
                        return_tensors="pt")

    head = torch.nn.Linear(config.hidden_size, 2)
    opt = torch.optim.Adam(list(model.parameters()) + list(head.parameters()),
                           lr=2e-3)
    model.train()
    for step in range(200):
        out = model(**encoded)
        mask = encoded["attention_mask"].unsqueeze(-1).float()
        pooled = (out.last_hidden_state * mask).sum(1) / mask.sum(1)
        logits = head(pooled)
        loss = torch.nn.functional.cross_entropy(logits, labels)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if (logits.argmax(1) == labels).float().mean() == 1.0 and step >= 60:
            break
    model.eval()

    model_dir = root / "encoder"
    model.save_pretrained(model_dir)
    tokenizer.save_pretrained(model_dir)
    return model_dir
