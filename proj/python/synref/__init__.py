from ._synref import contrastive_loss, datasets_jsonl, iou, run

__all__ = ["contrastive_loss", "datasets_jsonl", "iou", "run"]
