"""The two-stage detector: parameter construction, the differentiable
training pass producing every loss term, and deterministic inference.

Stage I: voxelize, backbone, vote/semantic heads, class-aware grouping,
anchor-free proposal head, score filter + oriented NMS.
Stage II: RoI-conv pooling over the backbone voxels and residual refinement.

Gradient flow notes: voxelization and vote-grid quantization are treated as
constant coordinate selections (vote positions receive gradient only through
their explicit smooth-l1 supervision), while all feature paths, including the
average-pooling re-voxelization of vote features, backpropagate.
"""
import math
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from . import autodiff as ad
from . import losses as L
from . import proposal as prop
from . import roipool
from .autodiff import Var
from .backbone import Backbone, BackboneConfig, VoxelVar
from .config import RunConfig
from .geometry import Box3D, boxes_to_array
from .nn import Norm, ParamStore, SparseConv
from .proposal import Proposal, ProposalHead, SemanticHead, VoteHead
from .sparse import KernelMapCache, SparseTensor, build_kernel_map
from .voxelize import ClassSizeTable, PointCloud, quantize, voxelize_avg

__all__ = ["Detector", "PipelineStageError", "Stage1Output"]


class PipelineStageError(RuntimeError):
    """A module failure annotated with the pipeline stage that raised it."""

    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}': {cause}")
        self.stage = stage


@dataclass
class Stage1Output:
    backbone: VoxelVar
    delta_x: Var
    sem_probs: Var
    vote_positions: np.ndarray
    vote_feats: Var
    class_coords: List[np.ndarray]
    class_cells: List[np.ndarray]
    class_feats: List[Var]
    cls_logits: List[Var]
    reg: List[Var]
    cntr_logits: List[Var]


class Detector:
    def __init__(self, cfg: RunConfig, sizes: ClassSizeTable):
        if sizes.n_class != cfg.n_class:
            raise ValueError("class size table does not match n_class")
        self.cfg = cfg
        dtype = np.float64 if cfg.precision == "f64" else np.float32
        self.store = ParamStore(dtype)
        rng = np.random.default_rng(cfg.seed)

        bb_cfg = BackboneConfig(
            in_channels=cfg.in_channels,
            stage_channels=tuple(cfg.stage_channels),
            blocks_per_stage=cfg.blocks_per_stage,
            highres_channels=cfg.highres_channels,
            highres_stride=cfg.highres_stride,
            out_channels=cfg.out_channels,
            norm=cfg.norm,
        )
        self.backbone = Backbone(self.store, "backbone", bb_cfg, rng)
        c = cfg.out_channels
        self.vote_head = VoteHead(self.store, "vote", c, cfg.vote_hidden, rng)
        self.sem_head = SemanticHead(self.store, "semantic", c, cfg.n_class, rng)
        # class-dependent aggregation convolutions: identical shapes, one per class
        self.group_convs = [
            SparseConv(self.store, f"group.class{j}", c, cfg.group_channels,
                       cfg.k_aggregation, rng)
            for j in range(cfg.n_class)
        ]
        self.prop_head = ProposalHead(self.store, "head", cfg.group_channels, cfg.n_class, rng)
        r1, r2 = cfg.roi_channels
        self.roi1 = SparseConv(self.store, "roi.block1", c, r1, cfg.roi_kernel1, rng)
        self.roi_norm1 = Norm(self.store, "roi.block1.norm", r1, cfg.norm)
        self.roi2 = SparseConv(self.store, "roi.block2", r1, r2, cfg.roi_kernel2, rng)
        self.refine_head = roipool.RefineHead(self.store, "refine", r2,
                                              cfg.refine_hidden, rng, cfg.norm)

        # d_j travels with the checkpoint: grouping geometry is part of the model
        self.class_sizes = self.store.state("class_sizes", sizes.sizes)
        self.sizes = ClassSizeTable(self.class_sizes)
        self.kmaps = KernelMapCache(1024)

    # -- pieces ------------------------------------------------------------

    def _roi_params(self, training: bool) -> roipool.RoiConvParams:
        cfg = self.cfg
        return roipool.RoiConvParams(
            kernel1=self.roi1.kernel, bias1=self.roi1.bias,
            kernel2=self.roi2.kernel, bias2=self.roi2.bias,
            resolution1=tuple(cfg.roi_grid1), resolution2=tuple(cfg.roi_grid2),
            kernel_size1=cfg.roi_kernel1, kernel_size2=cfg.roi_kernel2,
            post1=lambda v: ad.relu(self.roi_norm1(v, training)),
        )

    def voxelize_scene(self, cloud: PointCloud) -> SparseTensor:
        t = voxelize_avg(cloud, self.cfg.voxel_size3())
        dtype = self.store.dtype
        if t.feats.dtype != dtype:
            t = SparseTensor(t.coords, t.feats.astype(dtype), t.stride, t.voxel_size)
        return t

    def stage1(self, tensor: SparseTensor, tau: float, training: bool) -> Stage1Output:
        cfg = self.cfg
        try:
            bb = self.backbone(VoxelVar.from_tensor(tensor), training, self.kmaps)
        except Exception as e:
            raise PipelineStageError("backbone", e) from e

        try:
            dx, df = self.vote_head(bb.feats)
            sem = self.sem_head(bb.feats)
            votes = bb.centers() + dx.data
            vote_feats = bb.feats + df
        except Exception as e:
            raise PipelineStageError("vote/semantic", e) from e

        try:
            slices = prop.group_slices(sem.data, tau)
            class_coords, class_cells, class_feats = [], [], []
            cls_logits, regs, cntrs = [], [], []
            for j, idx in enumerate(slices):
                cell = cfg.alpha * self.sizes[j]
                class_cells.append(cell)
                if len(idx) == 0:
                    class_coords.append(np.empty((0, 3), np.int32))
                    class_feats.append(Var(np.zeros((0, cfg.group_channels), self.store.dtype)))
                    cls_logits.append(Var(np.zeros((0, cfg.n_class), self.store.dtype)))
                    regs.append(Var(np.zeros((0, 8), self.store.dtype)))
                    cntrs.append(Var(np.zeros((0, 1), self.store.dtype)))
                    continue
                _, uniq, inverse = quantize(votes[idx], cell)
                pooled = ad.segment_mean(ad.take_rows(vote_feats, idx), inverse, len(uniq))
                kmap = build_kernel_map(uniq, uniq, cfg.k_aggregation, 1)
                agg = self.group_convs[j](pooled, kmap)
                cls_j, reg_j, cntr_j = self.prop_head(agg)
                class_coords.append(uniq)
                class_feats.append(agg)
                cls_logits.append(cls_j)
                regs.append(reg_j)
                cntrs.append(cntr_j)
        except Exception as e:
            raise PipelineStageError("class_aware_group", e) from e

        return Stage1Output(bb, dx, sem, votes, vote_feats, class_coords,
                            class_cells, class_feats, cls_logits, regs, cntrs)

    def _class_voxel_centers(self, s1: Stage1Output, j: int) -> np.ndarray:
        return (s1.class_coords[j].astype(np.float64) + 0.5) * s1.class_cells[j]

    def decode_proposals(self, s1: Stage1Output, pre_nms_limit: Optional[int] = None) -> List[Proposal]:
        """Decode every class tensor's head outputs into proposals, keeping
        at most pre_nms_limit by score before filtering/NMS."""
        cfg = self.cfg
        if pre_nms_limit is None:
            pre_nms_limit = cfg.pre_nms_limit
        out: List[Proposal] = []
        for j in range(cfg.n_class):
            if len(s1.class_coords[j]) == 0:
                continue
            out.extend(prop.head_to_proposals(
                s1.cls_logits[j].data, s1.reg[j].data, s1.cntr_logits[j].data,
                self._class_voxel_centers(s1, j), j, self.sizes, cfg.alpha))
        if pre_nms_limit is not None and len(out) > pre_nms_limit:
            order = sorted(range(len(out)), key=lambda i: (-out[i].score, i))
            out = [out[i] for i in order[:pre_nms_limit]]
        return out

    def pool_and_refine(self, s1: Stage1Output, proposals: List[Proposal],
                        training: bool = False):
        """RoI-conv pooling plus the refinement MLP.

        Returns (pred_residuals Var (P, 8), hollow mask).
        """
        roi, hollow = roipool.roiconv_pool(
            s1.backbone.coords, s1.backbone.feats, s1.backbone.stride,
            s1.backbone.voxel_size, proposals, self._roi_params(training))
        return self.refine_head(roi, training), hollow

    def decode_refined(self, proposals: List[Proposal], residuals: np.ndarray) -> List[Box3D]:
        return [roipool.decode_residual(t, p.box) for p, t in zip(proposals, residuals)]

    def _decode_refined_var(self, proposals: List[Proposal], t: Var) -> Var:
        """In-graph decode of refined boxes to (P, 7) parameter rows."""
        pa = boxes_to_array([p.box for p in proposals])
        d = np.sqrt((pa[:, 3:6] ** 2).sum(axis=1, keepdims=True))
        centers = Var(pa[:, 0:3]) + ad.take_cols(t, 0, 3) * d
        w = ad.exp(ad.take_cols(t, 4, 5)) * pa[:, 3:4]
        l_ = ad.exp(ad.take_cols(t, 5, 6)) * pa[:, 4:5]
        h = ad.exp(ad.take_cols(t, 3, 4)) * pa[:, 5:6]
        theta = ad.atan2(ad.take_cols(t, 6, 7), ad.take_cols(t, 7, 8)) + pa[:, 6:7]
        return ad.concat_cols([centers, w, l_, h, theta])

    # -- training ----------------------------------------------------------

    def training_losses(self, cloud: PointCloud, gt_boxes: List[Box3D], gt_classes,
                        tau: float):
        """Every loss term of the objective for one scene.

        Returns (terms dict of scalar Vars, counts dict).
        """
        cfg = self.cfg
        counts = {}
        tensor = self.voxelize_scene(cloud)
        s1 = self.stage1(tensor, tau, training=True)

        try:
            targets = prop.assign_targets(
                SparseTensor(s1.backbone.coords, s1.backbone.feats.data,
                             s1.backbone.stride, s1.backbone.voxel_size),
                gt_boxes, gt_classes)
            fg = np.nonzero(targets.class_id >= 0)[0]
            counts["backbone_foreground"] = len(fg)
            sem_loss = L.focal_loss(s1.sem_probs, targets.class_id,
                                    cfg.focal_gamma, cfg.focal_alpha)
            if len(fg):
                vote_loss = L.smooth_l1(ad.take_rows(s1.delta_x, fg),
                                        targets.center_offset[fg], cfg.smooth_l1_beta)
            else:
                vote_loss = Var(np.zeros(()))
        except PipelineStageError:
            raise
        except Exception as e:
            raise PipelineStageError("target_assignment", e) from e

        try:
            cls_parts, cls_targets = [], []
            pos_reg, pos_centers, pos_boxes, pos_cntr, pos_cntr_targets, pos_class = [], [], [], [], [], []
            for j in range(cfg.n_class):
                mj = len(s1.class_coords[j])
                if mj == 0:
                    continue
                centers_j = self._class_voxel_centers(s1, j)
                boxes_j = [b for b, c in zip(gt_boxes, gt_classes) if c == j]
                tj = prop.assign_targets(
                    SparseTensor(s1.class_coords[j], np.zeros((mj, 1)), 1, s1.class_cells[j]),
                    boxes_j, [j] * len(boxes_j))
                cls_parts.append(ad.sigmoid(s1.cls_logits[j]))
                cls_targets.append(np.where(tj.class_id >= 0, j, -1))
                pos = np.nonzero(tj.class_id >= 0)[0]
                if len(pos) == 0:
                    continue
                assigned = [boxes_j[k] for k in tj.box_id[pos]]
                pos_reg.append(ad.take_rows(s1.reg[j], pos))
                pos_centers.append(centers_j[pos])
                pos_boxes.extend(assigned)
                pos_cntr.append(ad.sigmoid(ad.take_rows(s1.cntr_logits[j], pos)))
                pos_cntr_targets.append(prop.centerness_targets(assigned, centers_j[pos]))
                pos_class.append(np.full(len(pos), j))

            n_pos = sum(len(c) for c in pos_centers)
            counts["stage1_positives"] = n_pos
            if cls_parts:
                cls_loss = L.focal_loss(ad.concat_rows(cls_parts),
                                        np.concatenate(cls_targets),
                                        cfg.focal_gamma, cfg.focal_alpha)
            else:
                cls_loss = Var(np.zeros(()))
            if n_pos:
                cntr_loss = L.binary_cross_entropy(
                    ad.concat_rows(pos_cntr).reshape(-1),
                    np.concatenate(pos_cntr_targets))
                decoded = self._decode_stage1_var(pos_reg, pos_centers, pos_class)
                box_loss = L.iou_loss_rows(decoded, boxes_to_array(pos_boxes)).mean()
            else:
                cntr_loss = Var(np.zeros(()))
                box_loss = Var(np.zeros(()))
        except PipelineStageError:
            raise
        except Exception as e:
            raise PipelineStageError("proposal_head", e) from e

        try:
            proposals = self.decode_proposals(s1)
            proposals = prop.filter_nms(proposals, cfg.score_min, cfg.nms_iou)
            selected, gt_idx, _ = roipool.select_training_proposals(
                proposals, gt_boxes, cfg.proposal_iou_min, cfg.max_train_proposals)
            counts["stage2_selected"] = len(selected)
            if selected:
                pred_res, hollow = self.pool_and_refine(s1, selected, training=True)
                counts["stage2_hollow"] = int(hollow.sum())
                res_targets = np.stack([
                    roipool.encode_residual(p.box, gt_boxes[g])
                    for p, g in zip(selected, gt_idx)
                ])
                decoded_ref = self._decode_refined_var(selected, pred_res)
                gt_arr = boxes_to_array([gt_boxes[g] for g in gt_idx])
                rebox = L.rebox_loss(pred_res, res_targets, decoded_ref, gt_arr,
                                     cfg.smooth_l1_beta)
            else:
                rebox = Var(np.zeros(()))
        except PipelineStageError:
            raise
        except Exception as e:
            raise PipelineStageError("roi_refine", e) from e

        terms = {"sem": sem_loss, "vote": vote_loss, "cntr": cntr_loss,
                 "box": box_loss, "cls": cls_loss, "rebox": rebox}
        return terms, counts

    def _decode_stage1_var(self, pos_reg, pos_centers, pos_class) -> Var:
        """In-graph decode of positive stage-1 rows to (N, 7) box params."""
        cfg = self.cfg
        pieces = []
        for reg_j, centers_j, classes_j in zip(pos_reg, pos_centers, pos_class):
            j = int(classes_j[0])
            cell = cfg.alpha * self.sizes[j]
            prior = self.sizes[j]
            centers = Var(centers_j) + ad.take_cols(reg_j, 0, 3) * cell
            dims = ad.exp(ad.take_cols(reg_j, 3, 6)) * prior
            theta = ad.atan2(ad.take_cols(reg_j, 6, 7), ad.take_cols(reg_j, 7, 8))
            pieces.append(ad.concat_cols([centers, dims, theta]))
        return ad.concat_rows(pieces)

    # -- inference ----------------------------------------------------------

    def infer(self, cloud: PointCloud):
        """Full pipeline at the inference threshold (the schedule floor).

        Returns a list of (Box3D, score, class_id) after refinement,
        deterministic for fixed parameters and input.
        """
        cfg = self.cfg
        try:
            tensor = self.voxelize_scene(cloud)
        except Exception as e:
            raise PipelineStageError("voxelize", e) from e
        if tensor.n_voxels == 0:
            return []
        s1 = self.stage1(tensor, cfg.tau_min, training=False)
        try:
            proposals = self.decode_proposals(s1)
            proposals = prop.filter_nms(proposals, cfg.score_min, cfg.nms_iou)
        except Exception as e:
            raise PipelineStageError("filter_nms", e) from e
        if not proposals:
            return []
        try:
            pred_res, _ = self.pool_and_refine(s1, proposals)
            refined = self.decode_refined(proposals, pred_res.data)
        except Exception as e:
            raise PipelineStageError("roi_refine", e) from e
        return [(b, p.score, p.class_id) for b, p in zip(refined, proposals)]
