"""Keep-mask rendering, overlays, CKA curves, and the overlap probe."""

import numpy as np
import numpy.testing as npt
import pytest

from dcat.model import DcatConfig, DcatModel
from dcat.netpbm import read_pgm, read_ppm
from dcat.record import AttentionRecord
from dcat.synth import DataError, SynthSpec, batch_views, generate_dataset, samples_to_dataset
from dcat.visualize import (
    attention_overlay,
    cka_rows,
    class_attention_heat,
    format_cka_csv,
    inspect_outputs,
    keep_box_overlap,
    keep_mask_image,
    ranking_rounds,
)

SPEC36 = dict(side=36, distractors_lo=5, distractors_hi=6)


def tiny_config(**over):
    base = dict(global_side=36, mip_side=16, patch_mip=8, d_global=16,
                d_mip=8, heads_global=2, heads_mip=2, depth_global=1,
                depth_mip=1, cpa_rounds=1, layers=1, mlp_ratio=2,
                precision="f64", seed=0)
    base.update(over)
    return DcatConfig(**base)


@pytest.fixture(scope="module")
def data36():
    return samples_to_dataset(generate_dataset(SynthSpec(seed=21, **SPEC36), 12))


def recorded_forward(model, dataset, count=4):
    c = model.config
    g, m, _ = batch_views(dataset, np.arange(count), c.mip_side, dtype=c.np_dtype)
    record = AttentionRecord()
    model.forward(g, m, record=record)
    return record


class TestKeepMask:
    def test_blocks_match_kept_ids(self):
        img = keep_mask_image(np.array([0, 3]), num_patches=4, patch=2)
        expect = np.array([[255, 255, 0, 0],
                           [255, 255, 0, 0],
                           [0, 0, 255, 255],
                           [0, 0, 255, 255]], dtype=np.uint8)
        npt.assert_array_equal(img, expect)

    def test_alpha_one_mask_is_all_ones(self, data36):
        model = DcatModel(tiny_config(alpha_global=1.0, alpha_mip=1.0))
        record = recorded_forward(model, data36)
        kept, _ = ranking_rounds(record, "global")[0]
        img = keep_mask_image(kept[0], num_patches=9, patch=12)
        npt.assert_array_equal(img, np.full((36, 36), 255, dtype=np.uint8))

    def test_non_square_grid_rejected(self):
        with pytest.raises(ValueError, match="square"):
            keep_mask_image(np.array([0]), num_patches=6, patch=4)


class TestOverlay:
    def test_dims_equal_input_dims(self):
        image = np.random.default_rng(0).integers(0, 256, (3, 24, 24),
                                                  dtype=np.uint8)
        out = attention_overlay(image, np.full(4, 0.25), patch=12)
        assert out.shape == image.shape and out.dtype == np.uint8

    def test_peak_patch_goes_full_red_and_zero_stays_gray(self):
        image = np.full((3, 8, 8), 100, dtype=np.uint8)
        scores = np.array([0.0, 0.0, 0.0, 1.0])
        out = attention_overlay(image, scores, patch=4)
        luma = np.rint(0.299 * 100 + 0.587 * 100 + 0.114 * 100)
        assert np.all(out[0, 4:, 4:] == 255)          # strongest patch
        assert np.all(out[0, :4, :4] == luma)         # untouched patch
        assert np.all(out[1] == luma) and np.all(out[2] == luma)

    def test_mismatched_tiling_rejected(self):
        image = np.zeros((3, 8, 8), dtype=np.uint8)
        with pytest.raises(ValueError, match="tile"):
            attention_overlay(image, np.full(9, 1 / 9), patch=4)


class TestHeatSource:
    def test_ranked_model_uses_ranking_scores(self, data36):
        model = DcatModel(tiny_config())
        record = recorded_forward(model, data36)
        heat = class_attention_heat(record, "global")
        _, scores = ranking_rounds(record, "global")[0]
        npt.assert_array_equal(heat, scores)
        npt.assert_allclose(heat.sum(axis=-1), 1.0, atol=1e-6)

    def test_unranked_model_falls_back_to_mhsa_cls_row(self, data36):
        model = DcatModel(tiny_config(cca_mode=True, ranking_enabled=False))
        record = recorded_forward(model, data36)
        assert ranking_rounds(record, "global") == []
        heat = class_attention_heat(record, "global")
        assert heat.shape == (4, 9)
        npt.assert_allclose(heat.sum(axis=-1), 1.0, atol=1e-6)

    def test_inactive_branch_yields_none(self, data36):
        model = DcatModel(tiny_config(dual_input=False, single_branch="global",
                                      cpa_enabled=False))
        record = recorded_forward(model, data36)
        assert class_attention_heat(record, "mip") is None


class TestOverlapProbe:
    def test_alpha_one_covers_every_box_exactly(self, data36):
        model = DcatModel(tiny_config(alpha_global=1.0, alpha_mip=1.0))
        assert keep_box_overlap(model, data36, n=8) == 1.0

    def test_untrained_value_is_a_fraction(self, data36):
        model = DcatModel(tiny_config(seed=3))
        v = keep_box_overlap(model, data36, n=8)
        assert 0.0 <= v <= 1.0
        assert v == keep_box_overlap(model, data36, n=8)  # deterministic

    def test_model_without_ranking_rejected(self, data36):
        model = DcatModel(tiny_config(cca_mode=True, ranking_enabled=False))
        with pytest.raises(ValueError, match="ranking"):
            keep_box_overlap(model, data36, n=4)


class TestCka:
    def test_rows_cover_every_stage_of_both_branches(self, data36):
        model = DcatModel(tiny_config())
        rows = cka_rows(model, data36, n=8)
        # embed + 1 block + 1 fusion round = 3 stages per branch
        assert [(r[0], r[1]) for r in rows] == [
            (0, "global"), (1, "global"), (2, "global"),
            (0, "mip"), (1, "mip"), (2, "mip")]
        for _, _, v in rows:
            assert 0.0 <= v <= 1.0 + 1e-12

    def test_single_branch_model_reports_one_branch(self, data36):
        model = DcatModel(tiny_config(dual_input=False, single_branch="mip",
                                      cpa_enabled=False))
        rows = cka_rows(model, data36, n=8)
        assert {r[1] for r in rows} == {"mip"}

    def test_csv_round_trip(self):
        text = format_cka_csv([(0, "global", 0.5), (1, "mip", 1.0)])
        lines = text.splitlines()
        assert lines[0] == "layer,branch,cka"
        assert lines[1].split(",") == ["0", "global", "0.5"]
        assert float(lines[2].split(",")[2]) == 1.0


class TestInspectOutputs:
    def test_writes_masks_overlays_and_csv(self, data36, tmp_path):
        model = DcatModel(tiny_config())
        written = inspect_outputs(model, data36, sample=1,
                                  out_dir=str(tmp_path), cka_n=8)
        names = sorted(p.rsplit("/", 1)[-1] for p in written)
        assert names == ["attention_global.ppm", "attention_mip.ppm",
                         "cka.csv", "keep_global_r0.pgm", "keep_mip_r0.pgm"]
        mask = read_pgm(str(tmp_path / "keep_global_r0.pgm"))
        assert mask.shape == (36, 36)
        assert set(np.unique(mask)) <= {0, 255}
        # ceil(0.5 * 9) = 5 patches of 12x12 pixels survive
        assert int((mask == 255).sum()) == 5 * 12 * 12
        overlay = read_ppm(str(tmp_path / "attention_global.ppm"))
        assert overlay.shape == (3, 36, 36)
        mip_overlay = read_ppm(str(tmp_path / "attention_mip.ppm"))
        assert mip_overlay.shape == (3, 16, 16)

    def test_outputs_are_deterministic(self, data36, tmp_path):
        model = DcatModel(tiny_config())
        blobs = []
        for tag in ("a", "b"):
            out = tmp_path / tag
            paths = inspect_outputs(model, data36, sample=0,
                                    out_dir=str(out), cka_n=8)
            blobs.append([open(p, "rb").read() for p in sorted(paths)])
        assert blobs[0] == blobs[1]

    def test_single_branch_model_emits_only_its_branch(self, data36, tmp_path):
        model = DcatModel(tiny_config(dual_input=False, single_branch="global",
                                      cpa_enabled=False))
        written = inspect_outputs(model, data36, sample=0,
                                  out_dir=str(tmp_path), cka_n=8)
        names = sorted(p.rsplit("/", 1)[-1] for p in written)
        assert names == ["attention_global.ppm", "cka.csv"]

    def test_bad_sample_index_rejected(self, data36, tmp_path):
        model = DcatModel(tiny_config())
        with pytest.raises(DataError, match="sample index"):
            inspect_outputs(model, data36, sample=99, out_dir=str(tmp_path))
