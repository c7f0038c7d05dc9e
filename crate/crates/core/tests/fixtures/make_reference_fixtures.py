"""Regenerates the reference fixtures for the encoder parity tests.

Builds tiny randomly initialised CLIP and VGG models with the reference PyTorch
implementations (transformers, torchvision), saves their weights, and records
their outputs on fixed inputs.

    python3 make_reference_fixtures.py
"""
import json
import os

import torch
from safetensors.torch import save_file
from torchvision.models.vgg import make_layers
from transformers import CLIPConfig, CLIPModel

HERE = os.path.dirname(os.path.abspath(__file__))
CLIP_MEAN = torch.tensor([0.48145466, 0.4578275, 0.40821073]).view(1, 3, 1, 1)
CLIP_STD = torch.tensor([0.26862954, 0.26130258, 0.27577711]).view(1, 3, 1, 1)
IMAGENET_MEAN = torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1)
IMAGENET_STD = torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1)

# Token ids from the original CLIP tokenizer, with start/end markers.
PROMPTS = {
    "a photo of a cat.": [49406, 320, 1125, 539, 320, 2368, 269, 49407],
    "a drawing of a ship.": [49406, 320, 3610, 539, 320, 1158, 269, 49407],
}


def clip_fixture():
    torch.manual_seed(0)
    cfg = CLIPConfig(
        text_config=dict(
            vocab_size=49408, hidden_size=16, intermediate_size=64, num_attention_heads=2,
            num_hidden_layers=1, max_position_embeddings=77, hidden_act="quick_gelu",
            projection_dim=24,
        ),
        vision_config=dict(
            hidden_size=32, intermediate_size=128, num_attention_heads=2, num_hidden_layers=2,
            image_size=32, patch_size=8, hidden_act="quick_gelu", projection_dim=24,
        ),
        projection_dim=24,
    )
    model = CLIPModel(cfg).eval()
    # the default init leaves layer norms at identity; perturb them so the test sees them
    with torch.no_grad():
        for name, p in model.named_parameters():
            if "layer_norm" in name or "layrnorm" in name:
                p.add_(0.1 * torch.randn_like(p))
    state = {k: v.contiguous() for k, v in model.state_dict().items() if "position_ids" not in k}
    save_file(state, os.path.join(HERE, "tiny_clip.safetensors"))

    g = torch.Generator().manual_seed(1)
    image = torch.rand(1, 3, 32, 32, generator=g)
    x = (image - CLIP_MEAN) / CLIP_STD
    with torch.no_grad():
        vis = model.vision_model(pixel_values=x, output_hidden_states=True)
        emb = model.visual_projection(vis.pooler_output)
        taps = [h[0].flatten().tolist() for h in vis.hidden_states[1:]]
        text = {}
        for prompt, ids in PROMPTS.items():
            out = model.text_model(input_ids=torch.tensor([ids]))
            text[prompt] = model.text_projection(out.pooler_output)[0].tolist()
    return {
        "image": image.flatten().tolist(),
        "embedding": emb[0].tolist(),
        "taps": taps,
        "text": text,
    }


def vgg_fixture():
    torch.manual_seed(2)
    features = make_layers([8, "M", 16, "M", 16])
    torch.save({f"features.{k}": v for k, v in features.state_dict().items()},
               os.path.join(HERE, "tiny_vgg.pth"))
    g = torch.Generator().manual_seed(3)
    image = torch.rand(1, 3, 16, 16, generator=g)
    h = (image - IMAGENET_MEAN) / IMAGENET_STD
    taps = []
    with torch.no_grad():
        for i, layer in enumerate(features):
            h = layer(h)
            if i in (1, 4, 7):
                taps.append(h[0].flatten().tolist())
    return {"image": image.flatten().tolist(), "taps": taps}


if __name__ == "__main__":
    out = {"clip": clip_fixture(), "vgg": vgg_fixture()}
    with open(os.path.join(HERE, "reference_outputs.json"), "w") as f:
        json.dump(out, f)
