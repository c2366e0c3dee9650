"""Backbone wrapper: staged forward pass and patch-embedding aggregation."""
import numpy as np
import torch
import torch.nn.functional as F

BACKBONE_NAME = "wide_resnet50_2"
PRETRAINED_TAG = "IMAGENET1K_V1"
# per-channel normalization constants of the pretraining corpus
NORM_MEAN = (0.485, 0.456, 0.406)
NORM_STD = (0.229, 0.224, 0.225)


class FeatureExtractor:
    """Runs a ResNet-family trunk up to the deepest tapped stage.

    The model is held in eval mode; inference runs under
    torch.inference_mode so repeated exports of the same image are
    bit-identical.
    """

    def __init__(self, model: torch.nn.Module):
        for attr in ("conv1", "bn1", "relu", "maxpool", "layer1", "layer2", "layer3", "layer4"):
            if not hasattr(model, attr):
                raise TypeError(f"model lacks ResNet trunk attribute {attr!r}")
        self.model = model.eval()

    def embed(self, batch: torch.Tensor, taps: tuple[int, int], pool_size: int) -> np.ndarray:
        """(B, 3, S, S) normalized images -> (B, h, w, C) float32 embeddings.

        Each tapped activation map gets a pool_size x pool_size mean over its
        spatial neighborhood (stride 1, same resolution), the deeper map is
        bilinearly upsampled to the shallower one's resolution, and the two
        are concatenated along channels.
        """
        m = self.model
        with torch.inference_mode():
            x = m.maxpool(m.relu(m.bn1(m.conv1(batch))))
            grabbed = {}
            for stage, layer in ((1, m.layer1), (2, m.layer2), (3, m.layer3), (4, m.layer4)):
                x = layer(x)
                if stage in taps:
                    grabbed[stage] = x
                if stage == max(taps):
                    break
            shallow, deep = grabbed[taps[0]], grabbed[taps[1]]
            pad = pool_size // 2
            shallow = F.avg_pool2d(shallow, pool_size, stride=1, padding=pad)
            deep = F.avg_pool2d(deep, pool_size, stride=1, padding=pad)
            deep = F.interpolate(
                deep, size=shallow.shape[-2:], mode="bilinear", align_corners=False
            )
            out = torch.cat([shallow, deep], dim=1).permute(0, 2, 3, 1).contiguous()
        return out.numpy().astype(np.float32, copy=False)


def load_backbone() -> FeatureExtractor:
    """Pretrained WideResNet-50-2 wrapped for embedding export."""
    from torchvision import models

    weights = models.Wide_ResNet50_2_Weights.IMAGENET1K_V1
    return FeatureExtractor(models.wide_resnet50_2(weights=weights))


def preprocess(image, size: int) -> torch.Tensor:
    """PIL image -> normalized (3, size, size) float32 tensor."""
    from PIL import Image

    rgb = image.convert("RGB").resize((size, size), Image.BILINEAR)
    arr = np.asarray(rgb, dtype=np.float32) / 255.0
    arr = (arr - np.array(NORM_MEAN, dtype=np.float32)) / np.array(NORM_STD, dtype=np.float32)
    return torch.from_numpy(arr.transpose(2, 0, 1).copy())
