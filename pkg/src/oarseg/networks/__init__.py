"""Network builders: synthesis generator, patch discriminator, segmentation subnetwork and instance segmentor."""

from oarseg.networks.checkpoint import load_checkpoint, load_tensors, save_checkpoint, save_tensors
from oarseg.networks.instance import (
    MASK_SIZE,
    Backbone,
    FeatureFusionBackbone,
    InstancePrediction,
    InstanceSegmentor,
    RoiBatch,
    anchor_coverage,
    box_iou,
    build_instance_segmentor,
    decode_boxes,
    encode_boxes,
    fuse_inputs,
    make_anchors,
    mask_loss_for_rois,
    paste_masks,
    roi_mask_targets,
    sample_rois,
)
from oarseg.networks.spec import Fusion, NetworkKind, NetworkSpec
from oarseg.networks.unet import (
    PatchDiscriminator,
    UNet,
    build_discriminator,
    build_generator,
    build_seg_subnetwork,
    discriminator_geometry,
)


def build(spec: NetworkSpec):
    """Dispatch on ``spec.kind``."""
    return {
        NetworkKind.GENERATOR: build_generator,
        NetworkKind.DISCRIMINATOR: build_discriminator,
        NetworkKind.SEG_SUBNET: build_seg_subnetwork,
        NetworkKind.INSTANCE_SEG: build_instance_segmentor,
    }[spec.kind](spec)


__all__ = [
    "MASK_SIZE",
    "Backbone",
    "FeatureFusionBackbone",
    "Fusion",
    "InstancePrediction",
    "InstanceSegmentor",
    "NetworkKind",
    "NetworkSpec",
    "PatchDiscriminator",
    "RoiBatch",
    "UNet",
    "anchor_coverage",
    "box_iou",
    "build",
    "build_discriminator",
    "build_generator",
    "build_instance_segmentor",
    "build_seg_subnetwork",
    "decode_boxes",
    "discriminator_geometry",
    "encode_boxes",
    "fuse_inputs",
    "load_checkpoint",
    "load_tensors",
    "make_anchors",
    "mask_loss_for_rois",
    "paste_masks",
    "roi_mask_targets",
    "sample_rois",
    "save_checkpoint",
    "save_tensors",
]
